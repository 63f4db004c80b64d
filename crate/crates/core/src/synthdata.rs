//! Procedural taxonomy-structured scenes where the ROI alone can be ambiguous.
//!
//! Each scene holds one annotated glyph on a textured background:
//!
//! * the background texture and palette come from the rank-1 ancestor;
//! * the glyph shape comes from the terminal's parent, so terminal siblings
//!   share a shape and differ only by a small colored mark at the glyph
//!   center; the mark is left out with probability `alpha`;
//! * a few companion glyphs (the parent's shape, filled with the terminal's
//!   mark color) are scattered over the image outside the ROI window, so wider
//!   context crops are more likely to reveal the terminal.
//!
//! Output layout of [`generate`]:
//!
//! ```text
//! DIR/manifest.json
//! DIR/taxonomy.json
//! DIR/{train,test}/annotations.json
//! DIR/{train,test}/images/NNNNNN.png
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataio::{DataError, Dataset, DatasetFile, ImageRecord, RoiAnnotation};
use crate::roi_context::{build_context_set, square_roi_window, BBox, Image};
use crate::seed;
use crate::taxonomy::{TaxonId, TaxonNode, TaxonomyTree};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {field}: {reason}")]
    Spec { field: &'static str, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Png { path: PathBuf, source: image::ImageError },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    /// Children per node at ranks 1..=depth; its length is the taxonomy depth.
    pub branching: Vec<usize>,
    pub image_side: usize,
    /// Inclusive range of the ROI glyph width in pixels.
    pub roi_side: [f64; 2],
    pub train_samples: usize,
    pub test_samples: usize,
    /// Probability that the ROI glyph's distinguishing mark is left out.
    pub alpha: f64,
    /// Inclusive range of the number of companion glyphs.
    pub companions: [usize; 2],
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            branching: vec![3, 2, 2],
            image_side: 192,
            roi_side: [18.0, 30.0],
            train_samples: 2000,
            test_samples: 500,
            alpha: 0.8,
            companions: [2, 4],
        }
    }
}

impl SynthSpec {
    pub fn depth(&self) -> usize {
        self.branching.len()
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |field, reason: &str| Err(SynthError::Spec { field, reason: reason.to_string() });
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha", "must lie in [0, 1]");
        }
        if self.branching.is_empty() || self.branching.contains(&0) {
            return bad("branching", "needs at least one level and positive entries");
        }
        if self.branching.iter().product::<usize>() < 2 {
            return bad("branching", "product must be at least 2");
        }
        let [lo, hi] = self.roi_side;
        if !(lo >= 2.0 && lo <= hi) {
            return bad("roi_side", "must satisfy 2 <= min <= max");
        }
        if (self.image_side as f64) < 2.0 * hi * 1.2 + 4.0 {
            return bad("image_side", "too small for the largest ROI");
        }
        if self.companions[0] > self.companions[1] {
            return bad("companions", "min exceeds max");
        }
        if self.train_samples + self.test_samples == 0 {
            return bad("train_samples", "no samples requested");
        }
        Ok(())
    }
}

/// Per-split statistics recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub images: usize,
    pub rois: usize,
    pub classes: usize,
    /// Terminal taxon id -> sample count.
    pub per_class: BTreeMap<i64, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub alpha: f64,
    pub spec: SynthSpec,
    pub counts: BTreeMap<String, SplitCounts>,
    /// SHA-256 over the sorted list of `path<TAB>sha256` lines of every
    /// generated file except the manifests.
    pub checksum: String,
}

pub const SPLITS: [&str; 2] = ["train", "test"];

/// Balanced taxonomy with `branching[r]` children per rank-`r` node.
/// Ids are assigned breadth-first starting at 0 for the root.
pub fn synth_taxonomy(branching: &[usize]) -> Vec<TaxonNode> {
    let mut nodes = vec![TaxonNode { id: TaxonId(0), name: "root".into(), rank: 0, parent_id: None }];
    let mut frontier = vec![0i64];
    let mut next = 1i64;
    for (r, &b) in branching.iter().enumerate() {
        let mut level = Vec::new();
        for &parent in &frontier {
            for _ in 0..b {
                let k = level.len();
                nodes.push(TaxonNode { id: TaxonId(next), name: format!("t{}_{k}", r + 1), rank: r + 1, parent_id: Some(TaxonId(parent)) });
                level.push(next);
                next += 1;
            }
        }
        frontier = level;
    }
    nodes
}

/// Rendering roles of one terminal.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Role {
    family: usize,
    families: usize,
    /// Position of the parent among its own siblings; genera of one family
    /// share the family's base outline and differ by `variant` notches.
    variant: usize,
    /// Index of the parent within its rank; sets the companion outline.
    genus: usize,
    mark: usize,
}

fn roles(tree: &TaxonomyTree) -> BTreeMap<TaxonId, Role> {
    let depth = tree.depth();
    let families = tree.level(1).map(<[TaxonId]>::len).unwrap_or(1);
    let mut out = BTreeMap::new();
    for &t in tree.level(depth).unwrap_or(&[]) {
        let index_in = |id: TaxonId, rank: usize| tree.level(rank).ok().and_then(|l| l.iter().position(|&x| x == id)).unwrap_or(0);
        let family = index_in(tree.ancestor_at(t, 1).expect("terminal below root"), 1);
        let parent = tree.parent(t).ok().flatten().expect("terminal has a parent");
        let position = |id: TaxonId| -> usize {
            match tree.parent(id).ok().flatten() {
                Some(p) => tree.children(p).expect("parent exists").iter().position(|&c| c == id).unwrap_or(0),
                None => 0,
            }
        };
        let variant = if depth >= 3 { position(parent) } else { 0 };
        let genus = index_in(parent, depth - 1);
        out.insert(t, Role { family, families, variant, genus, mark: position(t) });
    }
    out
}

const MARK_COLORS: [[f64; 3]; 6] = [
    [0.92, 0.12, 0.12],
    [0.10, 0.80, 0.92],
    [0.95, 0.85, 0.10],
    [0.85, 0.15, 0.85],
    [0.15, 0.80, 0.20],
    [0.15, 0.25, 0.95],
];

const SHAPES: usize = 8;

/// Point-in-outline test in normalized glyph coordinates (`[-1, 1]²` box).
fn outline(shape: usize, u: f64, v: f64) -> bool {
    let (au, av) = (u.abs(), v.abs());
    match shape % SHAPES {
        0 => u * u + v * v <= 1.0,
        1 => au.max(av) <= 0.85,
        2 => (-0.9..=0.9).contains(&v) && au <= (v + 0.9) / 1.8,
        3 => au + av <= 1.0,
        4 => (au <= 0.32 && av <= 0.95) || (av <= 0.32 && au <= 0.95),
        5 => {
            let r2 = u * u + v * v;
            (0.3..=1.0).contains(&r2)
        }
        6 => av <= 0.866 && 3f64.sqrt() * au + av <= 3f64.sqrt(),
        _ => u * u + (v / 0.55) * (v / 0.55) <= 1.0,
    }
}

/// Family outline with `variant` rim notches cut at fixed angles.
fn inside(family: usize, variant: usize, u: f64, v: f64) -> bool {
    if !outline(family, u, v) {
        return false;
    }
    (0..variant).all(|k| {
        let a = -std::f64::consts::FRAC_PI_2 + k as f64 * 2.4;
        let (nu, nv) = (0.78 * a.cos(), 0.78 * a.sin());
        (u - nu) * (u - nu) + (v - nv) * (v - nv) > NOTCH_RADIUS * NOTCH_RADIUS
    })
}

/// Rotates glyph coordinates by `angle`.
fn rotate(u: f64, v: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    (c * u + s * v, -s * u + c * v)
}

const ROTATION_JITTER: f64 = 0.35;
const PIXEL_NOISE: f64 = 0.03;
const NOTCH_RADIUS: f64 = 0.42;

const MARK_RADIUS: f64 = 0.4;

/// Anti-aliased glyph: per-pixel coverage from 4×4 supersampling.
fn draw_glyph(img: &mut Image<f64>, cx: f64, cy: f64, w: f64, h: f64, mut paint: impl FnMut(f64, f64) -> Option<[f64; 3]>) {
    const SS: usize = 4;
    let (hw, hh) = (w / 2.0, h / 2.0);
    let x0 = (cx - hw).floor().max(0.0) as usize;
    let y0 = (cy - hh).floor().max(0.0) as usize;
    let x1 = ((cx + hw).ceil() as usize).min(img.width());
    let y1 = ((cy + hh).ceil() as usize).min(img.height());
    for py in y0..y1 {
        for px in x0..x1 {
            let mut acc = [0.0; 3];
            let mut hits = 0usize;
            for sy in 0..SS {
                for sx in 0..SS {
                    let x = px as f64 + (sx as f64 + 0.5) / SS as f64;
                    let y = py as f64 + (sy as f64 + 0.5) / SS as f64;
                    if let Some(c) = paint((x - cx) / hw, (y - cy) / hh) {
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                        hits += 1;
                    }
                }
            }
            if hits == 0 {
                continue;
            }
            let cov = hits as f64 / (SS * SS) as f64;
            for k in 0..3 {
                let bg = img.get(px, py, k);
                img.set(px, py, k, bg * (1.0 - cov) + acc[k] / (SS * SS) as f64);
            }
        }
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Two oriented sinusoids with a family-specific palette, orientation and
/// frequency; phases vary per scene.
fn background(side: usize, role: &Role, rng: &mut ChaCha8Rng) -> Image<f64> {
    let f = role.family as f64;
    let base = hsv(f / role.families as f64 + 0.08, 0.45, 0.5);
    let theta = std::f64::consts::PI * (0.15 + 0.61 * f);
    let freq = 0.035 + 0.025 * (role.family % 3) as f64;
    let (p1, p2) = (rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.0..std::f64::consts::TAU));
    let gain = rng.gen_range(0.9..1.1);
    let (ct, st) = (theta.cos(), theta.sin());
    let tau = std::f64::consts::TAU;
    Image::from_fn(side, side, |x, y, c| {
        let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
        let a = (tau * freq * (xf * ct + yf * st) + p1).sin();
        let b = (tau * freq * 1.7 * (-xf * st + yf * ct) + p2).sin();
        let t = 0.55 * a + 0.35 * b;
        (base[c] * gain * (1.0 + 0.35 * t)).clamp(0.0, 1.0)
    })
}

struct Scene {
    image: Image<f64>,
    bbox: BBox,
}

fn render(spec: &SynthSpec, role: &Role, split: u64, index: u64) -> Scene {
    let mut rng = seed::rng(&[spec.seed, seed::purpose::SYNTH, split, index]);
    let side = spec.image_side;
    let mut image = background(side, role, &mut rng);
    let w = rng.gen_range(spec.roi_side[0]..=spec.roi_side[1]);
    let h = w * rng.gen_range(0.8..1.2);
    let margin = w.max(h) / 2.0 + 1.0;
    let cx = rng.gen_range(margin..side as f64 - margin);
    let cy = rng.gen_range(margin..side as f64 - margin);
    let omit_mark = rng.gen_bool(spec.alpha);
    let gray = rng.gen_range(0.75..0.95);
    let body = [gray, gray, gray * 0.97];
    let mark = MARK_COLORS[role.mark % MARK_COLORS.len()];
    let angle = rng.gen_range(-ROTATION_JITTER..ROTATION_JITTER);
    draw_glyph(&mut image, cx, cy, w, h, |u, v| {
        if !omit_mark && u * u + v * v <= MARK_RADIUS * MARK_RADIUS {
            Some(mark)
        } else {
            let (ru, rv) = rotate(u, v, angle);
            inside(role.family, role.variant, ru, rv).then_some(body)
        }
    });

    let bbox = BBox::new(cx - w / 2.0, cy - h / 2.0, w, h);
    let keep_out = square_roi_window(&bbox).expect("positive extent");
    let count = rng.gen_range(spec.companions[0]..=spec.companions[1]);
    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    for _ in 0..count {
        let s = w * rng.gen_range(0.7..1.0);
        for _attempt in 0..64 {
            let x = rng.gen_range(s / 2.0..side as f64 - s / 2.0);
            let y = rng.gen_range(s / 2.0..side as f64 - s / 2.0);
            let clear_roi = (x - keep_out.cx).abs() > (keep_out.side + s) / 2.0 + 2.0 || (y - keep_out.cy).abs() > (keep_out.side + s) / 2.0 + 2.0;
            let clear_others = placed.iter().all(|&(px, py, ps)| (x - px).abs() > (ps + s) / 2.0 + 1.0 || (y - py).abs() > (ps + s) / 2.0 + 1.0);
            if clear_roi && clear_others {
                placed.push((x, y, s));
                break;
            }
        }
    }
    for &(x, y, s) in &placed {
        let angle = rng.gen_range(-ROTATION_JITTER..ROTATION_JITTER);
        draw_glyph(&mut image, x, y, s, s, |u, v| {
            let (ru, rv) = rotate(u, v, angle);
            outline(role.genus, ru, rv).then_some(mark)
        });
    }
    let normal = Normal::new(0.0, PIXEL_NOISE).expect("finite noise level");
    for p in image.data_mut() {
        *p = (*p + normal.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Scene { image, bbox }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.to_path_buf(), source }
}

/// Terminal assigned to sample `index`: round-robin over terminals, so
/// per-class counts differ by at most one.
fn terminal_for(terminals: &[TaxonId], index: usize) -> TaxonId {
    terminals[index % terminals.len()]
}

/// Writes both splits, the taxonomy and the manifest under `out_dir`.
pub fn generate(spec: &SynthSpec, out_dir: &Path) -> Result<SynthManifest, SynthError> {
    spec.validate()?;
    let records = synth_taxonomy(&spec.branching);
    let tree = TaxonomyTree::build(records.clone()).map_err(DataError::from)?;
    let roles = roles(&tree);
    let terminals: Vec<TaxonId> = roles.keys().copied().collect();
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let taxonomy_path = out_dir.join("taxonomy.json");
    std::fs::write(&taxonomy_path, serde_json::to_string_pretty(&records)?).map_err(io_err(&taxonomy_path))?;

    let mut counts = BTreeMap::new();
    for (split_code, (&split, n)) in SPLITS.iter().zip([spec.train_samples, spec.test_samples]).enumerate() {
        let split_dir = out_dir.join(split);
        let img_dir = split_dir.join("images");
        std::fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
        let mut images = Vec::with_capacity(n);
        let mut annotations = Vec::with_capacity(n);
        let mut per_class = BTreeMap::new();
        for i in 0..n {
            let taxon = terminal_for(&terminals, i);
            let scene = render(spec, &roles[&taxon], split_code as u64, i as u64);
            let id = i as i64 + 1;
            let file = PathBuf::from(format!("images/{id:06}.png"));
            let path = split_dir.join(&file);
            scene.image.save_png(&path).map_err(|source| SynthError::Png { path: path.clone(), source })?;
            images.push(ImageRecord { id, file, width: spec.image_side, height: spec.image_side });
            annotations.push(RoiAnnotation { id, image_id: id, bbox: scene.bbox, taxon_id: taxon });
            *per_class.entry(taxon.0).or_insert(0) += 1;
        }
        let file = DatasetFile { images, annotations, taxonomy: records.clone(), split: Some(split.to_string()) };
        let ann_path = split_dir.join("annotations.json");
        std::fs::write(&ann_path, serde_json::to_string_pretty(&file)?).map_err(io_err(&ann_path))?;
        counts.insert(split.to_string(), SplitCounts { images: n, rois: n, classes: per_class.len(), per_class });
    }

    let manifest = SynthManifest { seed: spec.seed, alpha: spec.alpha, spec: spec.clone(), counts, checksum: tree_checksum(out_dir)? };
    let path = out_dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Run record the CLI may drop next to a generated dataset.
pub const RUN_MANIFEST: &str = "run_manifest.json";

/// Checksum of every file under `dir` except `manifest.json` and the run record.
pub fn tree_checksum(dir: &Path) -> Result<String, SynthError> {
    let mut files = BTreeSet::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).map_err(io_err(&d))? {
            let path = entry.map_err(io_err(&d))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path != dir.join("manifest.json") && path != dir.join(RUN_MANIFEST) {
                files.insert(path);
            }
        }
    }
    let mut outer = Sha256::new();
    for path in files {
        let bytes = std::fs::read(&path).map_err(io_err(&path))?;
        let rel = path.strip_prefix(dir).unwrap_or(&path).to_string_lossy().replace('\\', "/");
        outer.update(format!("{rel}\t{:x}\n", Sha256::digest(&bytes)));
    }
    Ok(format!("{:x}", outer.finalize()))
}

/// Loads one generated split.
pub fn load_split(out_dir: &Path, split: &str) -> Result<Dataset, DataError> {
    let dir = out_dir.join(split);
    Dataset::load(&dir.join("annotations.json"), &dir)
}

/// Relabels exactly `⌊fraction·N⌋` annotations to a uniformly drawn proper
/// ancestor (the root included) of their current taxon.
pub fn truncate_labels(ds: &Dataset, fraction: f64, seed_value: u64) -> Dataset {
    let fraction = fraction.clamp(0.0, 1.0);
    let mut rng = seed::rng(&[seed_value, seed::purpose::TRUNCATE]);
    let mut eligible: Vec<&RoiAnnotation> = ds.annotations.iter().filter(|a| a.taxon_id != ds.tree.root()).collect();
    let k = ((fraction * ds.annotations.len() as f64).floor() as usize).min(eligible.len());
    eligible.shuffle(&mut rng);
    let mut chosen: Vec<&RoiAnnotation> = eligible[..k].to_vec();
    chosen.sort_by_key(|a| a.id);
    let relabel = chosen
        .into_iter()
        .map(|a| {
            let ancestors = ds.tree.ancestors(a.taxon_id).expect("validated taxon");
            (a.id, *ancestors.choose(&mut rng).expect("non-root taxon has an ancestor"))
        })
        .collect();
    ds.with_taxa(&relabel)
}

/// 1-nearest-neighbor sibling probe on ROI pixels.
///
/// Each test ROI is matched only against training ROIs whose terminal shares
/// its parent, so the accuracy measures how well raw ROI pixels separate
/// terminal siblings. Crops are resampled to `side × side`.
pub fn sibling_probe_accuracy(train: &Dataset, test: &Dataset, side: usize) -> Result<f64, SynthError> {
    let features = |ds: &Dataset| -> Result<Vec<(TaxonId, TaxonId, Vec<f32>)>, SynthError> {
        let mut out = Vec::with_capacity(ds.annotations.len());
        for a in &ds.annotations {
            let img = ds.load_image::<f32>(a.image_id)?;
            let cs = build_context_set(&img, &a.bbox, &[], side).map_err(|e| SynthError::Spec { field: "bbox", reason: e.to_string() })?;
            let parent = ds.tree.parent(a.taxon_id).map_err(DataError::from)?.unwrap_or(a.taxon_id);
            out.push((parent, a.taxon_id, cs.roi.data().to_vec()));
        }
        Ok(out)
    };
    let tr = features(train)?;
    let te = features(test)?;
    if te.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for (parent, truth, x) in &te {
        let best = tr
            .iter()
            .filter(|(p, _, _)| p == parent)
            .map(|(_, t, y)| (x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f32>(), *t))
            .min_by(|a, b| a.0.total_cmp(&b.0));
        if best.map(|b| b.1) == Some(*truth) {
            correct += 1;
        }
    }
    Ok(correct as f64 / te.len() as f64)
}
