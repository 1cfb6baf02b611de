//! Procedural shape-world corpus: seeded renders of colored glyphs with
//! captions, base/new class splits, K-shot sampling, and domain shifts.

use rand::seq::SliceRandom;
use rand::Rng;

use serde::{Deserialize, Serialize};

use crate::checkpoint::checksum64;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

/// Named color anchors every generator draws from. Fixed so that any class
/// name a spec can produce is coverable by one pretrained vocabulary.
pub const PALETTE: [(&str, [f64; 3]); 8] = [
    ("red", [0.85, 0.10, 0.10]),
    ("green", [0.10, 0.75, 0.15]),
    ("blue", [0.12, 0.25, 0.90]),
    ("yellow", [0.92, 0.88, 0.12]),
    ("orange", [0.95, 0.55, 0.08]),
    ("purple", [0.55, 0.12, 0.80]),
    ("cyan", [0.10, 0.80, 0.85]),
    ("magenta", [0.90, 0.15, 0.70]),
];

pub fn palette_rgb(name: &str) -> Result<[f64; 3]> {
    PALETTE
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, rgb)| *rgb)
        .ok_or_else(|| Error::Config(format!("color {name:?} is not a palette anchor")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Glyph {
    Circle,
    Square,
    Triangle,
    Cross,
    Diamond,
    Ring,
}

impl Glyph {
    pub const ALL: [Glyph; 6] = [
        Glyph::Circle,
        Glyph::Square,
        Glyph::Triangle,
        Glyph::Cross,
        Glyph::Diamond,
        Glyph::Ring,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Glyph::Circle => "circle",
            Glyph::Square => "square",
            Glyph::Triangle => "triangle",
            Glyph::Cross => "cross",
            Glyph::Diamond => "diamond",
            Glyph::Ring => "ring",
        }
    }

    /// Signed distance from `(x, y)` (glyph-centered pixels) to the glyph
    /// boundary at size `r`; negative inside.
    fn sdf(self, x: f64, y: f64, r: f64) -> f64 {
        let len = (x * x + y * y).sqrt();
        match self {
            Glyph::Circle => len - r,
            Glyph::Square => x.abs().max(y.abs()) - 0.9 * r,
            Glyph::Triangle => {
                // Equilateral, apex up: max over the three outward half-planes.
                let half = |deg: f64| {
                    let (s, c) = deg.to_radians().sin_cos();
                    x * c + y * s - 0.5 * r
                };
                half(90.0).max(half(210.0)).max(half(330.0))
            }
            Glyph::Cross => {
                let bar_h = (x.abs() - r).max(y.abs() - 0.35 * r);
                let bar_v = (y.abs() - r).max(x.abs() - 0.35 * r);
                bar_h.min(bar_v)
            }
            Glyph::Diamond => (x.abs() + y.abs()) * std::f64::consts::FRAC_1_SQRT_2 - 0.9 * r,
            Glyph::Ring => (len - 0.75 * r).abs() - 0.3 * r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    /// Center offset as a fraction of the image side.
    pub position: f64,
    /// Relative size wobble.
    pub scale: f64,
    /// Per-channel color wobble.
    pub hue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeWorldSpec {
    pub colors: Vec<String>,
    pub shapes: Vec<Glyph>,
    /// Background gray levels, one picked per render.
    pub backgrounds: Vec<f64>,
    pub image_side: usize,
    pub jitter: Jitter,
    pub seed: u64,
}

impl ShapeWorldSpec {
    pub fn default_world(seed: u64) -> Self {
        Self {
            colors: ["red", "green", "blue", "yellow"]
                .map(String::from)
                .to_vec(),
            shapes: vec![Glyph::Circle, Glyph::Square, Glyph::Triangle, Glyph::Cross],
            backgrounds: vec![0.05, 0.15],
            image_side: 32,
            jitter: Jitter {
                position: 0.12,
                scale: 0.2,
                hue: 0.08,
            },
            seed,
        }
    }

    /// Downstream recognition variant of the default world: broader
    /// backgrounds and stronger jitter than the pretraining renders. Tasks
    /// draw from this distribution so that few-shot adaptation faces the
    /// same pretraining-vs-deployment gap real vision-language models do;
    /// with identical distributions the manual template is already optimal
    /// and tuning has nothing to recover.
    pub fn deployment_world(seed: u64) -> Self {
        Self {
            backgrounds: vec![0.35, 0.5],
            jitter: Jitter {
                position: 0.12,
                scale: 0.2,
                hue: 0.18,
            },
            ..Self::default_world(seed)
        }
    }

    /// Transfer target: disjoint color anchors and unseen glyphs, playing
    /// the role of a second dataset for cross-world evaluation.
    pub fn transfer_world(seed: u64) -> Self {
        Self {
            colors: ["orange", "purple", "cyan", "magenta"]
                .map(String::from)
                .to_vec(),
            shapes: vec![Glyph::Diamond, Glyph::Ring, Glyph::Triangle, Glyph::Cross],
            ..Self::default_world(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.colors.len() < 4 {
            return Err(Error::Config("colors: at least 4 anchors required".into()));
        }
        if self.shapes.len() < 4 {
            return Err(Error::Config("shapes: at least 4 glyphs required".into()));
        }
        if self.colors.len() * self.shapes.len() < 8 {
            return Err(Error::Config("colors x shapes must give >= 8 classes".into()));
        }
        for c in &self.colors {
            palette_rgb(c)?;
        }
        if self.backgrounds.is_empty()
            || self.backgrounds.iter().any(|&b| !(0.0..=1.0).contains(&b))
        {
            return Err(Error::Config(
                "backgrounds: need >= 1 gray level inside [0,1]".into(),
            ));
        }
        if self.image_side < 8 {
            return Err(Error::Config("image_side: minimum 8 pixels".into()));
        }
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.colors.len() * self.shapes.len()
    }

    /// Class names in color-major order; index = color * |shapes| + shape.
    pub fn class_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.class_count());
        for c in &self.colors {
            for s in &self.shapes {
                out.push(format!("{c} {}", s.name()));
            }
        }
        out
    }

    pub fn caption(&self, class: usize) -> String {
        let shape = self.shapes[class % self.shapes.len()];
        let color = &self.colors[class / self.shapes.len()];
        format!("a photo of a {color} {}", shape.name())
    }
}

/// Row-major RGB raster with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub side: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.side + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    /// Content fingerprint used for train/test disjointness checks.
    pub fn content_hash(&self) -> u64 {
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        checksum64(&bytes)
    }
}

/// Deterministic raster of one class instance under seeded jitter.
pub fn render_image(spec: &ShapeWorldSpec, class: usize, seed: u64) -> Result<Image> {
    if class >= spec.class_count() {
        return Err(Error::Config(format!(
            "class {class} out of range for {} classes",
            spec.class_count()
        )));
    }
    let shape = spec.shapes[class % spec.shapes.len()];
    let base_rgb = palette_rgb(&spec.colors[class / spec.shapes.len()])?;
    let side = spec.image_side;
    let mut rng = seeded(
        derive_seed(spec.seed, "render") ^ seed,
        &format!("render:{class}"),
    );

    let background = *spec
        .backgrounds
        .choose(&mut rng)
        .expect("validated nonempty");
    let fside = side as f64;
    let cx = fside / 2.0 + rng.gen_range(-spec.jitter.position..=spec.jitter.position) * fside;
    let cy = fside / 2.0 + rng.gen_range(-spec.jitter.position..=spec.jitter.position) * fside;
    let r = 0.30 * fside * (1.0 + rng.gen_range(-spec.jitter.scale..=spec.jitter.scale));
    let mut rgb = base_rgb;
    for ch in &mut rgb {
        *ch = (*ch + rng.gen_range(-spec.jitter.hue..=spec.jitter.hue)).clamp(0.0, 1.0);
    }

    let mut pixels = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        for x in 0..side {
            let d = shape.sdf(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, r);
            let coverage = (0.5 - d / 1.5).clamp(0.0, 1.0);
            let grain = rng.gen_range(-0.02..=0.02);
            for ch in rgb {
                let v = background + coverage * (ch - background) + grain;
                pixels.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Ok(Image { side, pixels })
}

/// Balanced (image, caption) pairs for contrastive pretraining.
pub fn generate_corpus(spec: &ShapeWorldSpec, count: usize) -> Result<Vec<(Image, String)>> {
    if count == 0 {
        return Err(Error::Config("corpus count must be >= 1".into()));
    }
    spec.validate()?;
    let k = spec.class_count();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % k;
        let image = render_image(spec, class, derive_seed(i as u64, "corpus"))?;
        out.push((image, spec.caption(class)));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// Index into the task's global class list.
    pub class: usize,
    pub image: Image,
}

/// A few-shot episode: disjoint base/new class halves, K train shots per
/// base class, and per-class test pools for both halves.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotTask {
    pub classes: Vec<String>,
    pub base: Vec<usize>,
    pub new: Vec<usize>,
    pub train: Vec<LabeledImage>,
    pub test_base: Vec<LabeledImage>,
    pub test_new: Vec<LabeledImage>,
}

impl FewShotTask {
    pub fn base_names(&self) -> Vec<String> {
        self.base.iter().map(|&i| self.classes[i].clone()).collect()
    }

    pub fn new_names(&self) -> Vec<String> {
        self.new.iter().map(|&i| self.classes[i].clone()).collect()
    }
}

/// Seeded disjoint class split; `fraction` of classes become base.
pub fn split_base_new(classes: &[String], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config("split fraction must lie in [0,1]".into()));
    }
    let k = classes.len();
    let n_base = (k as f64 * fraction).round() as usize;
    if n_base < 2 || k - n_base < 2 {
        return Err(Error::Config(format!(
            "split leaves {n_base} base / {} new classes; need >= 2 per side",
            k - n_base
        )));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut seeded(seed, "split"));
    let mut base = order[..n_base].to_vec();
    let mut new = order[n_base..].to_vec();
    base.sort_unstable();
    new.sort_unstable();
    Ok((base, new))
}

/// Spec for a full episode, JSON-loadable from the command line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub world: ShapeWorldSpec,
    pub split_fraction: f64,
    pub split_seed: u64,
    pub shots: usize,
    pub test_per_class: usize,
}

impl TaskSpec {
    pub fn default_task(seed: u64) -> Self {
        Self {
            world: ShapeWorldSpec::deployment_world(seed),
            split_fraction: 0.5,
            split_seed: seed,
            shots: 16,
            test_per_class: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if self.shots == 0 {
            return Err(Error::Config("shots must be >= 1".into()));
        }
        if self.test_per_class == 0 {
            return Err(Error::Config("test_per_class must be >= 1".into()));
        }
        Ok(())
    }
}

/// Materialize a task: split classes and render disjoint train/test pools.
///
/// Train and test images come from disjoint seed namespaces; disjointness is
/// still asserted by content hash to catch degenerate jitter settings.
pub fn build_task(spec: &TaskSpec) -> Result<FewShotTask> {
    spec.validate()?;
    let classes = spec.world.class_names();
    let (base, new) = split_base_new(&classes, spec.split_fraction, spec.split_seed)?;

    let mut train = Vec::new();
    for &class in &base {
        for i in 0..spec.shots {
            let image = render_image(
                &spec.world,
                class,
                derive_seed(spec.split_seed, &format!("shot:{class}:{i}")),
            )?;
            train.push(LabeledImage { class, image });
        }
    }
    let render_pool = |side: &[usize]| -> Result<Vec<LabeledImage>> {
        let mut pool = Vec::new();
        for &class in side {
            for i in 0..spec.test_per_class {
                let image = render_image(
                    &spec.world,
                    class,
                    derive_seed(spec.split_seed, &format!("test:{class}:{i}")),
                )?;
                pool.push(LabeledImage { class, image });
            }
        }
        Ok(pool)
    };
    let test_base = render_pool(&base)?;
    let test_new = render_pool(&new)?;

    let train_hashes: std::collections::BTreeSet<u64> =
        train.iter().map(|s| s.image.content_hash()).collect();
    for s in test_base.iter().chain(&test_new) {
        if train_hashes.contains(&s.image.content_hash()) {
            return Err(Error::Config(
                "train/test image pools overlap; widen jitter or change seed".into(),
            ));
        }
    }
    Ok(FewShotTask {
        classes,
        base,
        new,
        train,
        test_base,
        test_new,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShiftKind {
    Noise,
    Invert,
    EdgeSketch,
    HueRotate,
}

impl ShiftKind {
    pub const ALL: [ShiftKind; 4] = [
        ShiftKind::Noise,
        ShiftKind::Invert,
        ShiftKind::EdgeSketch,
        ShiftKind::HueRotate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShiftKind::Noise => "noise",
            ShiftKind::Invert => "invert",
            ShiftKind::EdgeSketch => "edge-sketch",
            ShiftKind::HueRotate => "hue-rotate",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainShift {
    pub kind: ShiftKind,
    pub strength: f64,
}

/// Transformed copy of `image`; strength 0 is the identity, outputs clamped.
pub fn apply_domain_shift(image: &Image, shift: DomainShift) -> Image {
    let side = image.side;
    let s = shift.strength;
    if s == 0.0 {
        return image.clone();
    }
    let mut pixels = image.pixels.clone();
    match shift.kind {
        ShiftKind::Noise => {
            // A fixed salt keeps the shift a pure function of (image, shift).
            let mut rng = seeded(image.content_hash(), "domain-noise");
            for p in &mut pixels {
                *p = (*p + s * rng.gen_range(-1.0..=1.0)).clamp(0.0, 1.0);
            }
        }
        ShiftKind::Invert => {
            // Lerp toward the negative; strength 1 is a true involution.
            for p in &mut pixels {
                *p = (*p + s * (1.0 - 2.0 * *p)).clamp(0.0, 1.0);
            }
        }
        ShiftKind::EdgeSketch => {
            let lum = |x: usize, y: usize| {
                let [r, g, b] = image.pixel(x.min(side - 1), y.min(side - 1));
                0.299 * r + 0.587 * g + 0.114 * b
            };
            for y in 0..side {
                for x in 0..side {
                    let gx = lum(x + 1, y) - lum(x.saturating_sub(1), y);
                    let gy = lum(x, y + 1) - lum(x, y.saturating_sub(1));
                    let edge = (gx * gx + gy * gy).sqrt().min(1.0);
                    let o = (y * side + x) * 3;
                    for c in 0..3 {
                        pixels[o + c] =
                            (pixels[o + c] + s * (edge - pixels[o + c])).clamp(0.0, 1.0);
                    }
                }
            }
        }
        ShiftKind::HueRotate => {
            // Rotate around the gray axis by strength * 120 degrees.
            let theta = s * 2.0 * std::f64::consts::PI / 3.0;
            let (sin, cos) = theta.sin_cos();
            let a = cos + (1.0 - cos) / 3.0;
            let b = (1.0 - cos) / 3.0 - sin / 3.0f64.sqrt();
            let c = (1.0 - cos) / 3.0 + sin / 3.0f64.sqrt();
            for px in pixels.chunks_exact_mut(3) {
                let [r, g, bl] = [px[0], px[1], px[2]];
                px[0] = (a * r + b * g + c * bl).clamp(0.0, 1.0);
                px[1] = (c * r + a * g + b * bl).clamp(0.0, 1.0);
                px[2] = (b * r + c * g + a * bl).clamp(0.0, 1.0);
            }
        }
    }
    Image { side, pixels }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_deterministic_and_bounded() {
        let spec = ShapeWorldSpec::default_world(5);
        let a = render_image(&spec, 3, 42).unwrap();
        let b = render_image(&spec, 3, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
        let c = render_image(&spec, 3, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn corpus_is_balanced_and_captioned() {
        let spec = ShapeWorldSpec::default_world(1);
        let corpus = generate_corpus(&spec, 64).unwrap();
        assert_eq!(corpus.len(), 64);
        assert_eq!(corpus[0].1, "a photo of a red circle");
        let per_class = 64 / spec.class_count();
        for class in 0..spec.class_count() {
            let caption = spec.caption(class);
            assert_eq!(
                corpus.iter().filter(|(_, c)| *c == caption).count(),
                per_class
            );
        }
    }

    #[test]
    fn split_covers_classes_disjointly() {
        let classes = ShapeWorldSpec::default_world(0).class_names();
        let (base, new) = split_base_new(&classes, 0.5, 7).unwrap();
        assert_eq!(base.len(), 8);
        assert_eq!(new.len(), 8);
        let mut all: Vec<usize> = base.iter().chain(&new).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..16).collect::<Vec<_>>());
        let (b2, n2) = split_base_new(&classes, 0.5, 7).unwrap();
        assert_eq!((base, new), (b2, n2));
    }

    #[test]
    fn eight_classes_split_four_four() {
        let classes: Vec<String> = (0..8).map(|i| format!("c{i}")).collect();
        let (base, new) = split_base_new(&classes, 0.5, 0).unwrap();
        assert_eq!((base.len(), new.len()), (4, 4));
    }

    #[test]
    fn task_has_k_shots_and_disjoint_pools() {
        let mut spec = TaskSpec::default_task(3);
        spec.shots = 4;
        spec.test_per_class = 5;
        let task = build_task(&spec).unwrap();
        for &class in &task.base {
            assert_eq!(task.train.iter().filter(|s| s.class == class).count(), 4);
            assert_eq!(
                task.test_base.iter().filter(|s| s.class == class).count(),
                5
            );
        }
        for &class in &task.new {
            assert_eq!(task.test_new.iter().filter(|s| s.class == class).count(), 5);
        }
        assert!(task.train.iter().all(|s| task.base.contains(&s.class)));
    }

    #[test]
    fn shift_strength_zero_is_identity() {
        let spec = ShapeWorldSpec::default_world(2);
        let img = render_image(&spec, 0, 9).unwrap();
        for kind in ShiftKind::ALL {
            let out = apply_domain_shift(&img, DomainShift { kind, strength: 0.0 });
            assert_eq!(out, img, "{} at strength 0 must be identity", kind.name());
        }
    }

    #[test]
    fn invert_at_full_strength_is_an_involution() {
        let spec = ShapeWorldSpec::default_world(2);
        let img = render_image(&spec, 5, 11).unwrap();
        let shift = DomainShift {
            kind: ShiftKind::Invert,
            strength: 1.0,
        };
        let twice = apply_domain_shift(&apply_domain_shift(&img, shift), shift);
        let max_err = twice
            .pixels
            .iter()
            .zip(&img.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-6, "double inversion drifted by {max_err}");
    }

    #[test]
    fn shifts_stay_in_range_and_are_pure() {
        let spec = ShapeWorldSpec::default_world(2);
        let img = render_image(&spec, 7, 1).unwrap();
        for kind in ShiftKind::ALL {
            let shift = DomainShift { kind, strength: 0.6 };
            let a = apply_domain_shift(&img, shift);
            let b = apply_domain_shift(&img, shift);
            assert_eq!(a, b);
            assert!(a.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn spec_round_trips_through_json() {
        let spec = TaskSpec::default_task(4);
        let json = serde_json::to_string(&spec).unwrap();
        let back: TaskSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn raw_pixels_linearly_separate_two_distant_classes() {
        // Perceptron on red circles vs blue squares; classes must be
        // learnable from pixels alone for anything downstream to work.
        let spec = ShapeWorldSpec::default_world(13);
        let red_circle = 0;
        let blue_square = 2 * spec.shapes.len() + 1;
        let mut data = Vec::new();
        for i in 0..40 {
            data.push((render_image(&spec, red_circle, 1000 + i).unwrap(), 1.0));
            data.push((render_image(&spec, blue_square, 2000 + i).unwrap(), -1.0));
        }
        let dim = 32 * 32 * 3;
        let mut w = vec![0.0; dim + 1];
        for _ in 0..20 {
            for (img, label) in &data[..40] {
                let act: f64 = w[dim]
                    + img
                        .pixels
                        .iter()
                        .zip(&w[..dim])
                        .map(|(x, wi)| x * wi)
                        .sum::<f64>();
                if act * label <= 0.0 {
                    for (wi, x) in w[..dim].iter_mut().zip(&img.pixels) {
                        *wi += label * x;
                    }
                    w[dim] += label;
                }
            }
        }
        let correct = data[40..]
            .iter()
            .filter(|(img, label)| {
                let act: f64 = w[dim]
                    + img
                        .pixels
                        .iter()
                        .zip(&w[..dim])
                        .map(|(x, wi)| x * wi)
                        .sum::<f64>();
                act * label > 0.0
            })
            .count();
        let acc = correct as f64 / (data.len() - 40) as f64;
        assert!(acc > 0.9, "held-out linear accuracy {acc} too low");
    }
}
