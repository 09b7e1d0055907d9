//! AttrGrid: pedestrian-like synthetic images with known attribute zones.
//!
//! Each image is drawn on a 64×32 canonical canvas and resampled to the
//! configured size. Every attribute is rendered only inside its body zone, and
//! the clothing and shoe colours come from one shared palette, so telling
//! `upper_color` from `lower_color` requires looking in the right place.
//! Cameras shift, brighten and tint the whole figure; identities add a shade
//! offset and a small logo that attributes alone do not explain.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    quantize, AttributeSchema, Dataset, DatasetManifest, ImageSample, SampleRecord, Split,
    MANIFEST_VERSION,
};
use crate::error::{config_err, Result};

const CANVAS_H: usize = 64;
const CANVAS_W: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttrGridConfig {
    pub train_identities: usize,
    pub test_identities: usize,
    pub samples_per_identity: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub num_cameras: usize,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f64,
    /// Scales every per-sample variation (translation, brightness, tint,
    /// background clutter). At 1.0 translation reaches 10% of the image size;
    /// 0 disables all of it.
    pub jitter: f64,
    /// Adds a per-identity shade and logo. Without it identities must differ
    /// in their attribute vectors.
    pub identity_texture: bool,
    /// Background clutter patches per image, in clothing and accessory
    /// colours, so that attribute evidence outside its zone misleads.
    pub distractors: usize,
    /// Side of a clutter patch on the canonical canvas.
    pub distractor_size: usize,
    pub schema: AttributeSchema,
}

impl Default for AttrGridConfig {
    fn default() -> Self {
        Self {
            train_identities: 50,
            test_identities: 25,
            samples_per_identity: 8,
            image_height: 64,
            image_width: 32,
            num_cameras: 4,
            noise: 0.15,
            jitter: 1.0,
            identity_texture: true,
            distractors: 4,
            distractor_size: 8,
            schema: AttributeSchema::default_synthetic(),
        }
    }
}

/// Rectangle on the canonical 64×32 canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Zone {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Zone {
    const fn new(top: usize, left: usize, bottom: usize, right: usize) -> Self {
        Self {
            top,
            left,
            height: bottom - top + 1,
            width: right - left + 1,
        }
    }

    pub fn contains(&self, y: i64, x: i64) -> bool {
        y >= self.top as i64
            && y < (self.top + self.height) as i64
            && x >= self.left as i64
            && x < (self.left + self.width) as i64
    }

    pub fn intersects(&self, o: &Zone) -> bool {
        self.top < o.top + o.height
            && o.top < self.top + self.height
            && self.left < o.left + o.width
            && o.left < self.left + self.width
    }
}

const HEAD: Zone = Zone::new(0, 10, 11, 21);
const UPPER: Zone = Zone::new(12, 8, 31, 23);
const LOWER: Zone = Zone::new(32, 8, 49, 23);
const FEET: Zone = Zone::new(50, 8, 57, 23);
const GENDER: Zone = Zone::new(12, 1, 27, 6);
const BACKPACK: Zone = Zone::new(12, 25, 27, 30);
const BAG: Zone = Zone::new(30, 1, 41, 6);
const HANDBAG: Zone = Zone::new(40, 25, 51, 30);

/// Attribute names the renderer knows, their zone and maximum class count.
const RENDERERS: [(&str, Zone, usize); 10] = [
    ("hair", HEAD, 2),
    ("hat", HEAD, 2),
    ("upper_color", UPPER, 6),
    ("lower_color", LOWER, 6),
    ("lower_type", LOWER, 2),
    ("shoes", FEET, 3),
    ("backpack", BACKPACK, 2),
    ("bag", BAG, 2),
    ("handbag", HANDBAG, 2),
    ("gender", GENDER, 2),
];

/// Canonical body zone of a renderable attribute.
pub fn zone_for_attribute(name: &str) -> Option<Zone> {
    RENDERERS.iter().find(|r| r.0 == name).map(|r| r.1)
}

type Rgb = [f64; 3];

const PALETTE: [Rgb; 6] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.65, 0.2],
    [0.15, 0.25, 0.85],
    [0.9, 0.85, 0.15],
    [0.92, 0.92, 0.92],
    [0.1, 0.1, 0.1],
];
const CLUTTER: [Rgb; 10] = [
    PALETTE[0],
    PALETTE[1],
    PALETTE[2],
    PALETTE[3],
    PALETTE[4],
    PALETTE[5],
    HAT,
    BACKPACK_RGB,
    BAG_RGB,
    HANDBAG_RGB,
];
const SHOE_COLORS: [usize; 3] = [5, 4, 0];
const SKIN: Rgb = [0.87, 0.7, 0.56];
const HAIR: Rgb = [0.3, 0.18, 0.1];
const HAT: Rgb = [0.95, 0.55, 0.1];
const BACKPACK_RGB: Rgb = [0.5, 0.2, 0.6];
const BAG_RGB: Rgb = [0.55, 0.35, 0.15];
const HANDBAG_RGB: Rgb = [0.85, 0.3, 0.6];

/// Per-camera mean vertical shift, brightness and tint.
fn camera_style(camera: usize) -> (f64, f64, Rgb) {
    const SHIFT: [f64; 4] = [-2.0, 2.0, -1.0, 1.0];
    const GAIN: [f64; 4] = [1.0, 0.82, 1.12, 0.92];
    const TINT: [Rgb; 4] = [
        [0.0, 0.0, 0.0],
        [0.06, 0.0, -0.05],
        [-0.04, 0.03, 0.06],
        [0.0, -0.05, 0.02],
    ];
    let c = camera % 4;
    (SHIFT[c], GAIN[c], TINT[c])
}

struct Identity {
    labels: Vec<usize>,
    shade: Rgb,
    logo: [bool; 16],
}

impl AttrGridConfig {
    pub fn validate(&self) -> Result<()> {
        self.schema.validate()?;
        if self.train_identities + self.test_identities < 2 {
            return Err(config_err!(
                "need at least 2 identities, got {}",
                self.train_identities + self.test_identities
            ));
        }
        if self.train_identities == 0 {
            return Err(config_err!("need at least one train identity"));
        }
        if self.samples_per_identity == 0 {
            return Err(config_err!("samples_per_identity must be positive"));
        }
        if self.test_identities > 0 && self.samples_per_identity < 2 {
            return Err(config_err!(
                "test identities need at least 2 samples (query and gallery)"
            ));
        }
        if self.image_height == 0 || self.image_width == 0 || self.num_cameras == 0 {
            return Err(config_err!("image size and camera count must be positive"));
        }
        if self.distractor_size == 0 || self.distractor_size >= CANVAS_W {
            return Err(config_err!(
                "distractor_size must lie in [1, {CANVAS_W}), got {}",
                self.distractor_size
            ));
        }
        if !(0.0..=1.0).contains(&self.jitter) || self.noise < 0.0 {
            return Err(config_err!(
                "jitter must lie in [0, 1] and noise must be non-negative"
            ));
        }
        for g in &self.schema.groups {
            let (_, _, max) = RENDERERS
                .iter()
                .find(|r| r.0 == g.name)
                .ok_or_else(|| config_err!("no renderer for attribute '{}'", g.name))?;
            if g.num_classes > *max {
                return Err(config_err!(
                    "attribute '{}' can render at most {max} classes, schema asks for {}",
                    g.name,
                    g.num_classes
                ));
            }
        }
        Ok(())
    }

    fn num_identities(&self) -> usize {
        self.train_identities + self.test_identities
    }
}

/// Generates the dataset in memory. Write it out with [`Dataset::write_to`].
pub fn generate_attrgrid(config: &AttrGridConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identities = draw_identities(config, &mut rng)?;
    let k = config.schema.num_mask_groups;
    let mut records = Vec::new();
    let mut samples = Vec::new();
    for (id, ident) in identities.iter().enumerate() {
        let train = id < config.train_identities;
        for j in 0..config.samples_per_identity {
            let idx = records.len();
            let camera = j % config.num_cameras;
            let split = if train {
                Split::Train
            } else if j < config.samples_per_identity / 2 {
                Split::Query
            } else {
                Split::Gallery
            };
            let (pixels, gt) = render(config, ident, camera, &mut rng);
            records.push(SampleRecord {
                image: format!("images/{idx:05}.ppm"),
                identity: id,
                camera,
                labels: ident.labels.clone(),
                split,
                masks: Some(format!("masks/{idx:05}.pgm")),
            });
            debug_assert_eq!(gt.len(), k * config.image_height * config.image_width);
            samples.push(ImageSample {
                pixels,
                identity: id,
                camera,
                attr_labels: ident.labels.clone(),
                gt_masks: Some(gt),
            });
        }
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        seed,
        image_height: config.image_height,
        image_width: config.image_width,
        channels: 3,
        schema: config.schema.clone(),
        samples: records,
        generator: Some(config.clone()),
    };
    manifest.validate().map_err(crate::Error::Internal)?;
    Ok(Dataset::in_memory(manifest, samples))
}

fn draw_identities(config: &AttrGridConfig, rng: &mut ChaCha8Rng) -> Result<Vec<Identity>> {
    let groups = &config.schema.groups;
    let combos: f64 = groups.iter().map(|g| g.num_classes as f64).product();
    if !config.identity_texture && combos < config.num_identities() as f64 {
        return Err(config_err!(
            "{} identities cannot have distinct attribute vectors ({} combinations)",
            config.num_identities(),
            combos
        ));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(config.num_identities());
    while out.len() < config.num_identities() {
        let labels: Vec<usize> = groups.iter().map(|g| rng.gen_range(0..g.num_classes)).collect();
        let shade = [0; 3].map(|_: i32| rng.gen_range(-0.1..0.1));
        let logo = [0; 16].map(|_: i32| rng.gen_bool(0.5));
        if !config.identity_texture && !seen.insert(labels.clone()) {
            continue;
        }
        out.push(if config.identity_texture {
            Identity { labels, shade, logo }
        } else {
            Identity {
                labels,
                shade: [0.0; 3],
                logo: [false; 16],
            }
        });
    }
    Ok(out)
}

fn label_of(config: &AttrGridConfig, ident: &Identity, name: &str) -> Option<usize> {
    config
        .schema
        .groups
        .iter()
        .position(|g| g.name == name)
        .map(|i| ident.labels[i])
}

fn shaded(c: Rgb, s: Rgb) -> Rgb {
    [c[0] + s[0], c[1] + s[1], c[2] + s[2]]
}

/// Renders one sample: CHW pixels (already quantized to 8-bit levels) and the
/// K stacked ground-truth masks.
fn render(
    config: &AttrGridConfig,
    ident: &Identity,
    camera: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<f32>, Vec<u8>) {
    let j = config.jitter;
    let (cam_shift, cam_gain, cam_tint) = camera_style(camera);
    let max_dy = (CANVAS_H / 10) as f64;
    let max_dx = (CANVAS_W / 10) as f64;
    let dy = ((cam_shift + rng.gen_range(-4.0..=4.0)) * j).clamp(-max_dy, max_dy).round() as i64;
    let dx = (rng.gen_range(-max_dx..=max_dx) * j).round() as i64;
    let gain = 1.0 + (cam_gain - 1.0 + rng.gen_range(-0.05..0.05)) * j;
    let tint = cam_tint.map(|t| t * j);
    let bg_level = 0.5 + rng.gen_range(-0.1..0.1) * j;

    let mut canvas = vec![[bg_level; 3]; CANVAS_H * CANVAS_W];
    if j > 0.0 {
        for _ in 0..config.distractors {
            let color = *CLUTTER.choose(rng).expect("palette is non-empty");
            let sz = config.distractor_size;
            let y0 = rng.gen_range(0..CANVAS_H - sz);
            let x0 = rng.gen_range(0..CANVAS_W - sz);
            for y in y0..y0 + sz {
                for x in x0..x0 + sz {
                    canvas[y * CANVAS_W + x] = color;
                }
            }
        }
    }

    // Paint in canonical coordinates, then shift; the body overwrites clutter.
    let mut paint = |zone: Zone, f: &dyn Fn(usize, usize) -> Option<Rgb>| {
        for cy in zone.top..zone.top + zone.height {
            for cx in zone.left..zone.left + zone.width {
                let (y, x) = (cy as i64 + dy, cx as i64 + dx);
                if y < 0 || x < 0 || y >= CANVAS_H as i64 || x >= CANVAS_W as i64 {
                    continue;
                }
                if let Some(c) = f(cy - zone.top, cx - zone.left) {
                    canvas[y as usize * CANVAS_W + x as usize] = c;
                }
            }
        }
    };
    let label = |name| label_of(config, ident, name);
    let shade = ident.shade;

    paint(HEAD, &|_, _| Some(SKIN));
    if let Some(long) = label("hair") {
        paint(HEAD, &|r, c| {
            let side = long == 1 && (c < 2 || c >= HEAD.width - 2);
            (r < 3 || side).then_some(HAIR)
        });
    }
    if label("hat") == Some(1) {
        paint(HEAD, &|r, _| (r < 4).then_some(HAT));
    }
    let upper = PALETTE[label("upper_color").unwrap_or(4)];
    paint(UPPER, &|_, _| Some(shaded(upper, shade)));
    let logo = ident.logo;
    if logo.iter().any(|&b| b) {
        paint(UPPER, &|r, c| {
            let (lr, lc) = (r.checked_sub(6)?, c.checked_sub(6)?);
            (lr < 4 && lc < 4 && logo[lr * 4 + lc]).then(|| upper.map(|v| v * 0.45))
        });
    }
    let lower = PALETTE[label("lower_color").unwrap_or(2)];
    let shorts = label("lower_type") == Some(1);
    paint(LOWER, &|r, _| {
        Some(if shorts && r >= LOWER.height / 2 {
            SKIN
        } else {
            shaded(lower, shade)
        })
    });
    let shoes = PALETTE[SHOE_COLORS[label("shoes").unwrap_or(0)]];
    paint(FEET, &|_, _| Some(shoes));
    for (name, zone, color) in [
        ("backpack", BACKPACK, BACKPACK_RGB),
        ("bag", BAG, BAG_RGB),
        ("handbag", HANDBAG, HANDBAG_RGB),
    ] {
        if label(name) == Some(1) {
            paint(zone, &|_, _| Some(color));
        }
    }
    if let Some(g) = label("gender") {
        paint(GENDER, &|r, c| match g {
            0 => (c >= 3).then_some(SKIN),
            _ => Some(if r % 2 == 0 { HAIR } else { SKIN }),
        });
    }

    let (h, w) = (config.image_height, config.image_width);
    let normal = Normal::new(0.0, config.noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut pixels = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let src = canvas[(y * CANVAS_H / h) * CANVAS_W + x * CANVAS_W / w];
            for ch in 0..3 {
                let mut v = src[ch] * gain + tint[ch];
                if config.noise > 0.0 {
                    v += normal.sample(rng);
                }
                pixels[ch * h * w + y * w + x] = f32::from(quantize(v as f32)) / 255.0;
            }
        }
    }

    let k = config.schema.num_mask_groups;
    let mut gt = vec![0u8; k * h * w];
    for g in &config.schema.groups {
        let zone = zone_for_attribute(&g.name).expect("validated renderer");
        for y in 0..h {
            for x in 0..w {
                let (cy, cx) = ((y * CANVAS_H / h) as i64 - dy, (x * CANVAS_W / w) as i64 - dx);
                if zone.contains(cy, cx) {
                    gt[g.mask_group * h * w + y * w + x] = 1;
                }
            }
        }
    }
    (pixels, gt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(train: usize, test: usize, spi: usize) -> AttrGridConfig {
        AttrGridConfig {
            train_identities: train,
            test_identities: test,
            samples_per_identity: spi,
            ..AttrGridConfig::default()
        }
    }

    #[test]
    fn four_identities_two_samples() {
        let ds = generate_attrgrid(&cfg(4, 0, 2), 3).unwrap();
        assert_eq!(ds.len(), 8);
        for pair in ds.manifest.samples.chunks(2) {
            assert_eq!(pair[0].identity, pair[1].identity);
            assert_eq!(pair[0].labels, pair[1].labels);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let c = cfg(3, 2, 4);
        let a = generate_attrgrid(&c, 9).unwrap();
        let b = generate_attrgrid(&c, 9).unwrap();
        assert_eq!(a.manifest, b.manifest);
        for i in 0..a.len() {
            assert_eq!(a.sample(i).unwrap(), b.sample(i).unwrap());
        }
        let other = generate_attrgrid(&c, 10).unwrap();
        assert_ne!(a.sample(0).unwrap().pixels, other.sample(0).unwrap().pixels);
    }

    #[test]
    fn no_noise_no_jitter_gives_identical_samples() {
        let c = AttrGridConfig {
            noise: 0.0,
            jitter: 0.0,
            ..cfg(2, 0, 3)
        };
        let ds = generate_attrgrid(&c, 1).unwrap();
        let a = ds.sample(0).unwrap();
        assert_eq!(a.pixels, ds.sample(1).unwrap().pixels);
        assert_eq!(a.pixels, ds.sample(2).unwrap().pixels);
    }

    #[test]
    fn zones_of_distinct_mask_groups_are_disjoint() {
        let s = AttributeSchema::default_synthetic();
        for a in &s.groups {
            for b in &s.groups {
                if a.mask_group != b.mask_group {
                    let (za, zb) = (zone_for_attribute(&a.name).unwrap(), zone_for_attribute(&b.name).unwrap());
                    assert!(!za.intersects(&zb), "{} overlaps {}", a.name, b.name);
                }
            }
        }
    }

    #[test]
    fn translation_stays_within_ten_percent() {
        let c = AttrGridConfig {
            noise: 0.0,
            ..cfg(2, 0, 8)
        };
        let ds = generate_attrgrid(&c, 5).unwrap();
        for i in 0..ds.len() {
            let gt = ds.sample(i).unwrap().gt_masks.unwrap();
            // Head mask: first set row/column gives the shift.
            let (h, w) = (64usize, 32usize);
            let first = (0..h * w).find(|&p| gt[p] == 1).unwrap();
            let (y, x) = ((first / w) as i64, (first % w) as i64);
            assert!(y <= 6, "row {y}");
            assert!((x - 10).abs() <= 3, "col {x}");
        }
    }

    #[test]
    fn untextured_identities_have_distinct_attributes() {
        let c = AttrGridConfig {
            identity_texture: false,
            ..cfg(30, 10, 2)
        };
        let ds = generate_attrgrid(&c, 2).unwrap();
        let vecs: HashSet<_> = ds.manifest.samples.iter().map(|s| s.labels.clone()).collect();
        assert_eq!(vecs.len(), 40);
    }

    #[test]
    fn rejects_unrenderable_schemas() {
        let mut c = cfg(2, 0, 1);
        c.schema.groups[0].name = "umbrella".into();
        assert!(generate_attrgrid(&c, 0).is_err());
        assert!(generate_attrgrid(&cfg(1, 0, 4), 0).is_err());
    }
}
