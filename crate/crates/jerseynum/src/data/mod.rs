//! Deterministic synthetic jersey-number images and dataset manifests.
//!
//! Every image is a pure function of its [`RenderSpec`]: a style seed (the
//! "game" identity — jersey color, font weight, slant, number placement), a
//! per-sample noise seed, an occlusion level, and a blur sigma. Datasets are
//! planned class-by-class with style seeds partitioned disjointly across
//! splits, so no rendering style leaks from train into val or test.

mod font;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{encode_targets, ClassSet, CodecError, JerseyLabel, TargetTriple};
use crate::tensor::{Element, Tensor};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("manifest parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn from_tag(s: &str) -> Result<Self, DataError> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DataError::Parse(format!("unknown split tag {other:?}"))),
        }
    }
}

/// Everything that determines one rendered image, bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderSpec {
    pub label: JerseyLabel,
    /// Controls jersey color, font weight, slant and number placement.
    pub style_seed: u64,
    /// Per-sample seed for placement jitter, pixel noise and occluder position.
    pub noise_seed: u64,
    /// Fraction of the digit bounding box covered by the occluder, in [0,1].
    pub occlusion_level: f64,
    /// Gaussian blur standard deviation in pixels, applied last.
    pub blur_sigma: f64,
}

/// Generator-wide rendering parameters recorded in the manifest header.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorParams {
    pub image_size: (usize, usize),
    /// Per-record occlusion levels are drawn uniformly from [0, max].
    pub max_occlusion: f64,
    /// Per-record blur sigmas are drawn uniformly from [0, max].
    pub max_blur_sigma: f64,
}

impl Default for GeneratorParams {
    fn default() -> Self {
        GeneratorParams {
            image_size: (64, 64),
            max_occlusion: 0.0,
            max_blur_sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    /// Image path relative to the manifest's directory.
    pub path: String,
    pub label: JerseyLabel,
    pub style_seed: u64,
    pub split: Split,
}

/// A planned dataset: class set, per-record assignments, and the generator
/// parameters needed to reproduce every image.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub class_set: ClassSet,
    pub records: Vec<ManifestRecord>,
    pub params: GeneratorParams,
    pub split_ratios: (f64, f64, f64),
    pub master_seed: u64,
    pub style_seeds: Vec<u64>,
}

/// Global split sizes for `n` records: train and val round down, test takes
/// the remainder (e.g. 810 records at (0.7, 0.12, 0.18) -> 567/97/146).
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> (usize, usize, usize) {
    let train = (n as f64 * ratios.0 + 1e-9).floor() as usize;
    let val = (n as f64 * ratios.1 + 1e-9).floor() as usize;
    (train, val, n - train - val)
}

/// Per-class counts interpolated geometrically so that
/// `max(count) / min(count)` equals `ratio` exactly.
pub fn imbalanced_counts(num_classes: usize, min_count: usize, ratio: f64) -> Vec<usize> {
    assert!(num_classes >= 1 && min_count >= 1 && ratio >= 1.0);
    if num_classes == 1 {
        return vec![min_count];
    }
    let k = num_classes as f64 - 1.0;
    (0..num_classes)
        .map(|i| {
            if i == num_classes - 1 {
                // Exact endpoint so the extreme ratio holds precisely.
                (min_count as f64 * ratio).round() as usize
            } else {
                ((min_count as f64) * ratio.powf(i as f64 / k)).round() as usize
            }
        })
        .collect()
}

pub fn balanced_counts(num_classes: usize, per_class: usize) -> Vec<usize> {
    vec![per_class; num_classes]
}

impl DatasetManifest {
    /// Plans a dataset without touching the filesystem.
    ///
    /// Records are laid out class-major in class-set order. Per-class counts
    /// are apportioned to splits by flooring each quota and then assigning
    /// leftovers to whichever split is furthest from its global target, so
    /// the global sizes equal [`split_sizes`] exactly while every class stays
    /// within one record of its own quota per split. Style seeds are
    /// partitioned across splits by the same ratios and sampled per record
    /// from the owning split's pool.
    pub fn plan(
        classes: &ClassSet,
        per_class_counts: &[usize],
        style_seeds: &[u64],
        split_ratios: (f64, f64, f64),
        master_seed: u64,
        params: GeneratorParams,
    ) -> Result<DatasetManifest, DataError> {
        let (rt, rv, rs) = split_ratios;
        if rt <= 0.0 || rv <= 0.0 || rs <= 0.0 || (rt + rv + rs - 1.0).abs() > 1e-9 {
            return Err(DataError::Config(format!(
                "split ratios must be positive and sum to 1, got ({rt}, {rv}, {rs})"
            )));
        }
        if per_class_counts.len() != classes.len() {
            return Err(DataError::Config(format!(
                "{} classes but {} per-class counts",
                classes.len(),
                per_class_counts.len()
            )));
        }
        if per_class_counts.iter().any(|&c| c == 0) {
            return Err(DataError::Config("every class needs at least one record".into()));
        }
        if params.image_size.0 < 16 || params.image_size.1 < 16 {
            return Err(DataError::Config(format!(
                "image size {}x{} below minimum 16x16",
                params.image_size.0, params.image_size.1
            )));
        }
        if style_seeds.iter().collect::<HashSet<_>>().len() != style_seeds.len() {
            return Err(DataError::Config("duplicate style seeds".into()));
        }

        // Partition style seeds disjointly across splits, by the same ratios.
        let (s_train, s_val, s_test) = split_sizes(style_seeds.len(), split_ratios);
        if s_train < 3 || s_val < 3 || s_test < 3 {
            return Err(DataError::Config(format!(
                "insufficient style seeds for a disjoint split: got {s_train}/{s_val}/{s_test} per split, need >= 3 each"
            )));
        }
        let seed_pools = [
            &style_seeds[..s_train],
            &style_seeds[s_train..s_train + s_val],
            &style_seeds[s_train + s_val..],
        ];

        // Global split targets.
        let total: usize = per_class_counts.iter().sum();
        let targets = split_sizes(total, split_ratios);

        // Stratified apportionment: floor every per-class quota, then hand
        // each class's leftover records to the split with the largest global
        // deficit. Sums of floors never exceed the targets, so the deficits
        // absorb exactly the leftovers and global sizes come out exact.
        let ratios = [rt, rv, rs];
        let mut per_class_split: Vec<[usize; 3]> = Vec::with_capacity(classes.len());
        let mut assigned = [0usize; 3];
        for &count in per_class_counts {
            let mut cells = [0usize; 3];
            for s in 0..3 {
                cells[s] = ((count as f64) * ratios[s] + 1e-9).floor() as usize;
                assigned[s] += cells[s];
            }
            per_class_split.push(cells);
        }
        let mut deficit = [
            targets.0 - assigned[0],
            targets.1 - assigned[1],
            targets.2 - assigned[2],
        ];
        for (ci, &count) in per_class_counts.iter().enumerate() {
            let mut leftover = count - per_class_split[ci].iter().sum::<usize>();
            while leftover > 0 {
                let mut s = 0;
                for c in 1..3 {
                    if deficit[c] > deficit[s] {
                        s = c;
                    }
                }
                debug_assert!(deficit[s] > 0);
                per_class_split[ci][s] += 1;
                deficit[s] -= 1;
                leftover -= 1;
            }
        }
        debug_assert_eq!(deficit, [0, 0, 0]);

        // Lay out records class-major, drawing style seeds from a single
        // master-seeded stream.
        let mut style_rng = ChaCha8Rng::seed_from_u64(master_seed);
        let mut records = Vec::with_capacity(total);
        for (ci, &label) in classes.labels().iter().enumerate() {
            for (s, &split) in Split::ALL.iter().enumerate() {
                for _ in 0..per_class_split[ci][s] {
                    let pool = seed_pools[s];
                    let style_seed = pool[style_rng.gen_range(0..pool.len())];
                    records.push(ManifestRecord {
                        path: format!("images/img_{:06}.png", records.len()),
                        label,
                        style_seed,
                        split,
                    });
                }
            }
        }

        let manifest = DatasetManifest {
            class_set: classes.clone(),
            records,
            params,
            split_ratios,
            master_seed,
            style_seeds: style_seeds.to_vec(),
        };
        manifest.check_split_disjointness()?;
        Ok(manifest)
    }

    /// Verifies that no style seed appears in more than one split.
    pub fn check_split_disjointness(&self) -> Result<(), DataError> {
        let mut seen: std::collections::HashMap<u64, Split> = Default::default();
        for r in &self.records {
            if let Some(&prev) = seen.get(&r.style_seed) {
                if prev != r.split {
                    return Err(DataError::Config(format!(
                        "style seed {} appears in both {} and {}",
                        r.style_seed,
                        prev.tag(),
                        r.split.tag()
                    )));
                }
            } else {
                seen.insert(r.style_seed, r.split);
            }
        }
        Ok(())
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split_len(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    /// The full render spec for one record, with per-record occlusion and
    /// blur levels drawn deterministically from the master seed.
    pub fn render_spec(&self, idx: usize) -> Result<RenderSpec, DataError> {
        let record = self
            .records
            .get(idx)
            .ok_or_else(|| DataError::Index(format!("record {idx} out of range")))?;
        let noise_seed = splitmix64(self.master_seed ^ splitmix64(idx as u64 + 1));
        let mut level_rng = ChaCha8Rng::seed_from_u64(splitmix64(noise_seed ^ 0xA5A5_5A5A_F0F0_0F0F));
        let occlusion_level = level_rng.gen_range(0.0..=self.params.max_occlusion);
        let blur_sigma = level_rng.gen_range(0.0..=self.params.max_blur_sigma);
        Ok(RenderSpec {
            label: record.label,
            style_seed: record.style_seed,
            noise_seed,
            occlusion_level,
            blur_sigma,
        })
    }

    /// Renders every image under `root` as 8-bit RGB PNGs.
    pub fn write_images(&self, root: &Path) -> Result<(), DataError> {
        let image_dir = root.join("images");
        std::fs::create_dir_all(&image_dir)?;
        let results: Vec<Result<(), DataError>> = (0..self.records.len())
            .into_par_iter()
            .map(|idx| {
                let spec = self.render_spec(idx)?;
                let img: Tensor<f64> = render_sample(&spec, self.params.image_size);
                let path = root.join(&self.records[idx].path);
                save_png(&img, &path)
            })
            .collect();
        for r in results {
            r?;
        }
        Ok(())
    }

    // ── Text serialization ───────────────────────────────────────────

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("[jersey-manifest v1]\n");
        s.push_str(&format!(
            "image_size = {}x{}\n",
            self.params.image_size.0, self.params.image_size.1
        ));
        s.push_str(&format!("max_occlusion = {}\n", self.params.max_occlusion));
        s.push_str(&format!("max_blur_sigma = {}\n", self.params.max_blur_sigma));
        s.push_str(&format!("master_seed = {}\n", self.master_seed));
        s.push_str(&format!(
            "split_ratios = {},{},{}\n",
            self.split_ratios.0, self.split_ratios.1, self.split_ratios.2
        ));
        s.push_str(&format!(
            "style_seeds = {}\n",
            self.style_seeds
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        ));
        s.push_str(&format!("classes = {}\n", self.class_set.to_token_list()));
        s.push_str("[records]\n");
        for r in &self.records {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                r.path,
                r.label,
                r.style_seed,
                r.split.tag()
            ));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines
            .next()
            .ok_or_else(|| DataError::Parse("empty manifest".into()))?;
        if first.trim() != "[jersey-manifest v1]" {
            return Err(DataError::Parse(format!("bad manifest header {first:?}")));
        }

        let mut image_size = None;
        let mut max_occlusion = None;
        let mut max_blur_sigma = None;
        let mut master_seed = None;
        let mut split_ratios = None;
        let mut style_seeds = None;
        let mut classes = None;
        let mut records = Vec::new();
        let mut in_records = false;

        for (lineno, raw) in lines {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let ctx = |msg: String| DataError::Parse(format!("line {}: {msg}", lineno + 1));
            if line == "[records]" {
                in_records = true;
                continue;
            }
            if !in_records {
                let (key, value) = line
                    .split_once('=')
                    .ok_or_else(|| ctx(format!("expected key = value, got {line:?}")))?;
                let (key, value) = (key.trim(), value.trim());
                match key {
                    "image_size" => {
                        let (h, w) = value
                            .split_once('x')
                            .ok_or_else(|| ctx(format!("bad image_size {value:?}")))?;
                        image_size = Some((
                            h.parse().map_err(|e| ctx(format!("bad height: {e}")))?,
                            w.parse().map_err(|e| ctx(format!("bad width: {e}")))?,
                        ));
                    }
                    "max_occlusion" => {
                        max_occlusion =
                            Some(value.parse().map_err(|e| ctx(format!("bad value: {e}")))?)
                    }
                    "max_blur_sigma" => {
                        max_blur_sigma =
                            Some(value.parse().map_err(|e| ctx(format!("bad value: {e}")))?)
                    }
                    "master_seed" => {
                        master_seed =
                            Some(value.parse().map_err(|e| ctx(format!("bad value: {e}")))?)
                    }
                    "split_ratios" => {
                        let parts: Vec<f64> = value
                            .split(',')
                            .map(|p| p.trim().parse())
                            .collect::<Result<_, _>>()
                            .map_err(|e| ctx(format!("bad ratios: {e}")))?;
                        if parts.len() != 3 {
                            return Err(ctx("need exactly 3 split ratios".into()));
                        }
                        split_ratios = Some((parts[0], parts[1], parts[2]));
                    }
                    "style_seeds" => {
                        style_seeds = Some(
                            value
                                .split(',')
                                .map(|p| p.trim().parse())
                                .collect::<Result<Vec<u64>, _>>()
                                .map_err(|e| ctx(format!("bad seeds: {e}")))?,
                        );
                    }
                    "classes" => {
                        classes = Some(ClassSet::from_token_list(value)?);
                    }
                    other => return Err(ctx(format!("unknown key {other:?}"))),
                }
            } else {
                let fields: Vec<&str> = line.split('\t').collect();
                if fields.len() != 4 {
                    return Err(ctx(format!("expected 4 tab-separated fields, got {}", fields.len())));
                }
                records.push(ManifestRecord {
                    path: fields[0].to_string(),
                    label: fields[1]
                        .parse()
                        .map_err(|e: CodecError| ctx(e.to_string()))?,
                    style_seed: fields[2].parse().map_err(|e| ctx(format!("bad seed: {e}")))?,
                    split: Split::from_tag(fields[3])?,
                });
            }
        }

        let manifest = DatasetManifest {
            class_set: classes.ok_or_else(|| DataError::Parse("missing classes".into()))?,
            records,
            params: GeneratorParams {
                image_size: image_size
                    .ok_or_else(|| DataError::Parse("missing image_size".into()))?,
                max_occlusion: max_occlusion
                    .ok_or_else(|| DataError::Parse("missing max_occlusion".into()))?,
                max_blur_sigma: max_blur_sigma
                    .ok_or_else(|| DataError::Parse("missing max_blur_sigma".into()))?,
            },
            split_ratios: split_ratios
                .ok_or_else(|| DataError::Parse("missing split_ratios".into()))?,
            master_seed: master_seed.ok_or_else(|| DataError::Parse("missing master_seed".into()))?,
            style_seeds: style_seeds.ok_or_else(|| DataError::Parse("missing style_seeds".into()))?,
        };
        for r in &manifest.records {
            if !manifest.class_set.contains(r.label) {
                return Err(DataError::Parse(format!(
                    "record label {} not in class set",
                    r.label
                )));
            }
        }
        manifest.check_split_disjointness()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        Ok(std::fs::write(path, self.to_text())?)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the serialized manifest, recorded in experiment outputs
    /// to prove all runs consumed identical data.
    pub fn sha256(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_text().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

// ── Rendering ────────────────────────────────────────────────────────

struct StyleDraw {
    bg: [f64; 3],
    ink: [f64; 3],
    occluder: [f64; 3],
    bold: bool,
    slant: f64,
    offset: (f64, f64),
}

fn style_from_seed(style_seed: u64) -> StyleDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(style_seed ^ 0x57F1_E007));
    let hue = rng.gen_range(0.0..1.0);
    let sat = rng.gen_range(0.45..0.95);
    let val = rng.gen_range(0.25..0.9);
    let bg = hsv_to_rgb(hue, sat, val);

    // Ink contrasts with the jersey by value.
    let ink_val = if val > 0.55 {
        rng.gen_range(0.02..0.2)
    } else {
        rng.gen_range(0.8..1.0)
    };
    let ink_hue = rng.gen_range(0.0..1.0);
    let ink_sat = rng.gen_range(0.0..0.25);
    let ink = hsv_to_rgb(ink_hue, ink_sat, ink_val);

    let occ_gray = rng.gen_range(0.1..0.7);
    StyleDraw {
        bg: [bg.0, bg.1, bg.2],
        ink: [ink.0, ink.1, ink.2],
        occluder: [occ_gray, occ_gray, occ_gray],
        bold: rng.gen_bool(0.5),
        slant: rng.gen_range(-0.18..0.18),
        offset: (rng.gen_range(-0.06..0.06), rng.gen_range(-0.06..0.06)),
    }
}

/// Renders one sample as an RGB tensor `[3, h, w]` with values in [0,1].
///
/// Digits are drawn centered on the jersey-colored background; a null label
/// renders background only. The occluder covers `occlusion_level` of the
/// digit bounding box area; Gaussian blur is applied last.
pub fn render_sample<E: Element>(spec: &RenderSpec, size: (usize, usize)) -> Tensor<E> {
    let (h, w) = size;
    assert!(h >= 16 && w >= 16, "minimum render size is 16x16");
    let style = style_from_seed(spec.style_seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.noise_seed);

    let jitter_x = noise_rng.gen_range(-0.03..0.03);
    let jitter_y = noise_rng.gen_range(-0.03..0.03);
    let noise_amp = noise_rng.gen_range(0.004..0.025);

    // Digit bounding box in pixels.
    let cx = (0.5 + style.offset.0 + jitter_x) * w as f64;
    let cy = (0.48 + style.offset.1 + jitter_y) * h as f64;
    let box_h = 0.52 * h as f64;
    let digits = match spec.label.as_number() {
        None => Vec::new(),
        Some(n) if n >= 10 => vec![n / 10, n % 10],
        Some(n) => vec![n],
    };
    let glyph_w = 0.30 * w as f64;
    let gap = 0.05 * w as f64;
    let total_w = match digits.len() {
        2 => glyph_w * 2.0 + gap,
        _ => glyph_w,
    };
    let bbox = (
        (cx - total_w / 2.0).max(0.0),
        (cy - box_h / 2.0).max(0.0),
        (cx + total_w / 2.0).min(w as f64),
        (cy + box_h / 2.0).min(h as f64),
    );

    let mut img = vec![0.0f64; 3 * h * w];
    for c in 0..3 {
        img[c * h * w..(c + 1) * h * w].fill(style.bg[c]);
    }

    // Ink the glyphs.
    for (di, &digit) in digits.iter().enumerate() {
        let x0 = cx - total_w / 2.0 + di as f64 * (glyph_w + gap);
        let y0 = cy - box_h / 2.0;
        draw_glyph(
            &mut img, h, w, digit, x0, y0, glyph_w, box_h, style.slant, style.bold, &style.ink,
        );
    }

    // Occluder rectangle covering `occlusion_level` of the bbox area.
    if spec.occlusion_level > 0.0 {
        let frac = spec.occlusion_level.clamp(0.0, 1.0).sqrt();
        let bw = bbox.2 - bbox.0;
        let bh = bbox.3 - bbox.1;
        let ow = bw * frac;
        let oh = bh * frac;
        let max_dx = bw - ow;
        let max_dy = bh - oh;
        let ox = bbox.0 + noise_rng.gen_range(0.0..=1.0) * max_dx;
        let oy = bbox.1 + noise_rng.gen_range(0.0..=1.0) * max_dy;
        let px0 = ox.floor() as usize;
        let py0 = oy.floor() as usize;
        let px1 = ((ox + ow).ceil() as usize).min(w);
        let py1 = ((oy + oh).ceil() as usize).min(h);
        for y in py0..py1 {
            for x in px0..px1 {
                for c in 0..3 {
                    img[c * h * w + y * w + x] = style.occluder[c];
                }
            }
        }
    }

    // Pixel noise, then blur.
    for v in img.iter_mut() {
        *v = (*v + noise_rng.gen_range(-noise_amp..noise_amp)).clamp(0.0, 1.0);
    }
    if spec.blur_sigma > 1e-3 {
        gaussian_blur(&mut img, h, w, spec.blur_sigma);
    }

    Tensor::from_f64(vec![3, h, w], &img).expect("shape matches buffer")
}

#[allow(clippy::too_many_arguments)]
fn draw_glyph(
    img: &mut [f64],
    h: usize,
    w: usize,
    digit: u8,
    x0: f64,
    y0: f64,
    gw: f64,
    gh: f64,
    slant: f64,
    bold: bool,
    ink: &[f64; 3],
) {
    let px0 = x0.floor().max(0.0) as usize;
    let py0 = y0.floor().max(0.0) as usize;
    let px1 = ((x0 + gw + gh * slant.abs()).ceil() as usize).min(w);
    let py1 = ((y0 + gh).ceil() as usize).min(h);
    for y in py0..py1 {
        let fy = (y as f64 + 0.5 - y0) / gh;
        if !(0.0..1.0).contains(&fy) {
            continue;
        }
        let row = ((fy * font::GLYPH_ROWS as f64) as usize).min(font::GLYPH_ROWS - 1);
        let shear = slant * (fy - 0.5) * gh;
        for x in px0..px1 {
            let fx = (x as f64 + 0.5 - x0 - shear) / gw;
            if !(0.0..1.0).contains(&fx) {
                continue;
            }
            let col = ((fx * font::GLYPH_COLS as f64) as usize).min(font::GLYPH_COLS - 1);
            if font::cell_on(digit, row, col, bold) {
            for c in 0..3 {
                    img[c * h * w + y * w + x] = ink[c];
                }
            }
        }
    }
}

fn gaussian_blur(img: &mut [f64], h: usize, w: usize, sigma: f64) {
    let radius = (sigma * 2.5).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let denom = 2.0 * sigma * sigma;
    for i in -radius..=radius {
        kernel.push((-((i * i) as f64) / denom).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }

    let mut tmp = vec![0.0f64; h * w];
    for c in 0..3 {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        // Horizontal pass.
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1) as usize;
                    acc += kv * plane[y * w + sx];
                }
                tmp[y * w + x] = acc;
            }
        }
        // Vertical pass.
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let sy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[sy * w + x];
                }
                plane[y * w + x] = acc;
            }
        }
    }
}

// ── Color space ──────────────────────────────────────────────────────

pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta <= 0.0 {
        0.0
    } else if (max - r).abs() < f64::EPSILON {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if (max - g).abs() < f64::EPSILON {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h.rem_euclid(1.0), s, v)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = (h6.floor() as i64).rem_euclid(6) as u8;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Shifts every pixel's hue by one uniform draw from `[-magnitude,
/// +magnitude]` (fractions of the hue wheel), leaving saturation and value
/// untouched.
pub fn hue_jitter<E: Element>(
    image: &Tensor<E>,
    magnitude: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<E>, DataError> {
    if !(0.0..=0.5).contains(&magnitude) {
        return Err(DataError::Config(format!(
            "hue jitter magnitude {magnitude} outside [0, 0.5]"
        )));
    }
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(DataError::Config(format!(
            "hue_jitter: expected [3,H,W] image, got {s:?}"
        )));
    }
    let shift = rng.gen_range(-magnitude..=magnitude);
    Ok(shift_hue(image, shift))
}

/// Deterministic hue rotation by `shift` (mod 1).
pub fn shift_hue<E: Element>(image: &Tensor<E>, shift: f64) -> Tensor<E> {
    let s = image.shape();
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let data = image.data();
    let mut out = vec![E::zero(); data.len()];
    for i in 0..plane {
        let r = data[i].as_f64();
        let g = data[plane + i].as_f64();
        let b = data[2 * plane + i].as_f64();
        let (hue, sat, val) = rgb_to_hsv(r, g, b);
        let (nr, ng, nb) = hsv_to_rgb((hue + shift).rem_euclid(1.0), sat, val);
        out[i] = E::from_f64(nr.clamp(0.0, 1.0));
        out[plane + i] = E::from_f64(ng.clamp(0.0, 1.0));
        out[2 * plane + i] = E::from_f64(nb.clamp(0.0, 1.0));
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

// ── Augmentation policy & batch loading ──────────────────────────────

/// Training-time augmentation: hue jitter only. Affine transforms are
/// rejected at construction; rescaling crops can push a jersey number out of
/// frame, so the pipeline never performs them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationPolicy {
    hue_jitter_max: f64,
}

impl AugmentationPolicy {
    pub fn new(hue_jitter_max: f64, affine_enabled: bool) -> Result<Self, DataError> {
        if affine_enabled {
            return Err(DataError::Config(
                "affine augmentation is not supported; policy rejects affine_enabled = true".into(),
            ));
        }
        if !(0.0..=0.5).contains(&hue_jitter_max) {
            return Err(DataError::Config(format!(
                "hue_jitter_max {hue_jitter_max} outside [0, 0.5]"
            )));
        }
        Ok(AugmentationPolicy { hue_jitter_max })
    }

    pub fn hue_jitter_max(&self) -> f64 {
        self.hue_jitter_max
    }

    /// No augmentation at all (val/test loading).
    pub fn none() -> Self {
        AugmentationPolicy { hue_jitter_max: 0.0 }
    }
}

impl Default for AugmentationPolicy {
    /// Aggressive hue variation by default; it mimics cross-team jersey
    /// colors, which is the point of the jitter.
    fn default() -> Self {
        AugmentationPolicy { hue_jitter_max: 0.4 }
    }
}

/// Loads manifest images from disk, with an optional in-memory RGB8 cache
/// for splits that are scanned repeatedly.
pub struct ImageStore<'m> {
    manifest: &'m DatasetManifest,
    root: PathBuf,
    cache: Vec<Option<Vec<u8>>>,
}

impl<'m> ImageStore<'m> {
    pub fn new(manifest: &'m DatasetManifest, root: &Path) -> Self {
        ImageStore {
            manifest,
            root: root.to_path_buf(),
            cache: vec![None; manifest.records.len()],
        }
    }

    pub fn manifest(&self) -> &DatasetManifest {
        self.manifest
    }

    /// Reads and caches every image of `split`.
    pub fn preload(&mut self, split: Split) -> Result<(), DataError> {
        let indices = self.manifest.split_indices(split);
        let loaded: Vec<(usize, Result<Vec<u8>, DataError>)> = indices
            .par_iter()
            .map(|&i| (i, self.read_rgb8(i)))
            .collect();
        for (i, r) in loaded {
            self.cache[i] = Some(r?);
        }
        Ok(())
    }

    fn read_rgb8(&self, idx: usize) -> Result<Vec<u8>, DataError> {
        let path = self.root.join(&self.manifest.records[idx].path);
        let img = image::open(&path)?.into_rgb8();
        let (h, w) = self.manifest.params.image_size;
        if (img.height() as usize, img.width() as usize) != (h, w) {
            return Err(DataError::Parse(format!(
                "{}: expected {h}x{w}, got {}x{}",
                path.display(),
                img.height(),
                img.width()
            )));
        }
        // HWC u8 -> CHW u8
        let mut chw = vec![0u8; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                let px = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    chw[c * h * w + y * w + x] = px[c];
                }
            }
        }
        Ok(chw)
    }

    fn image_f64(&mut self, idx: usize) -> Result<Vec<f64>, DataError> {
        if self.cache[idx].is_none() {
            self.cache[idx] = Some(self.read_rgb8(idx)?);
        }
        Ok(self.cache[idx]
            .as_ref()
            .unwrap()
            .iter()
            .map(|&b| b as f64 / 255.0)
            .collect())
    }

    /// Assembles a batch from `indices` into `split`'s record list.
    ///
    /// Train batches are hue-jittered per the policy (one shift drawn per
    /// image, in index order, from `rng`); val and test pixels are returned
    /// exactly as stored. Decoding and jitter run per-image in parallel.
    pub fn load_batch<E: Element>(
        &mut self,
        split: Split,
        indices: &[usize],
        policy: &AugmentationPolicy,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor<E>, Vec<TargetTriple>), DataError> {
        let split_indices = self.manifest.split_indices(split);
        let (h, w) = self.manifest.params.image_size;
        let mut record_idxs = Vec::with_capacity(indices.len());
        for &i in indices {
            let &record_idx = split_indices.get(i).ok_or_else(|| {
                DataError::Index(format!(
                    "index {i} out of range for {} {} records",
                    split_indices.len(),
                    split.tag()
                ))
            })?;
            record_idxs.push(record_idx);
        }

        // Decode cache misses in parallel, then fill the cache in order.
        let mut missing: Vec<usize> = record_idxs
            .iter()
            .copied()
            .filter(|&r| self.cache[r].is_none())
            .collect();
        missing.sort_unstable();
        missing.dedup();
        let decoded: Vec<(usize, Result<Vec<u8>, DataError>)> = missing
            .par_iter()
            .map(|&r| (r, self.read_rgb8(r)))
            .collect();
        for (r, d) in decoded {
            self.cache[r] = Some(d?);
        }

        // One hue shift per train image, drawn in index order.
        let jitter = split == Split::Train && policy.hue_jitter_max() > 0.0;
        let shifts: Vec<f64> = record_idxs
            .iter()
            .map(|_| {
                if jitter {
                    let m = policy.hue_jitter_max();
                    rng.gen_range(-m..=m)
                } else {
                    0.0
                }
            })
            .collect();

        let plane = 3 * h * w;
        let mut data = vec![E::zero(); indices.len() * plane];
        let cache = &self.cache;
        let results: Vec<Result<(), DataError>> = data
            .par_chunks_mut(plane)
            .zip(record_idxs.par_iter().zip(&shifts))
            .map(|(out, (&r, &shift))| {
                let raw = cache[r].as_ref().expect("cached above");
                if jitter {
                    let pixels: Vec<f64> = raw.iter().map(|&b| b as f64 / 255.0).collect();
                    let img = Tensor::<f64>::new(vec![3, h, w], pixels).expect("shape");
                    let shifted = shift_hue(&img, shift);
                    for (o, &v) in out.iter_mut().zip(shifted.data()) {
                        *o = E::from_f64(v);
                    }
                } else {
                    for (o, &b) in out.iter_mut().zip(raw.iter()) {
                        *o = E::from_f64(b as f64 / 255.0);
                    }
                }
                Ok(())
            })
            .collect();
        for r in results {
            r?;
        }

        let mut targets = Vec::with_capacity(indices.len());
        for &record_idx in &record_idxs {
            targets.push(encode_targets(
                self.manifest.records[record_idx].label,
                &self.manifest.class_set,
            )?);
        }
        let batch =
            Tensor::new(vec![indices.len(), 3, h, w], data).expect("batch shape matches data");
        Ok((batch, targets))
    }
}

fn save_png(img: &Tensor<f64>, path: &Path) -> Result<(), DataError> {
    let s = img.shape();
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let data = img.data();
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (data[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8,
                (data[plane + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8,
                (data[2 * plane + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    rgb.save(path)?;
    Ok(())
}
