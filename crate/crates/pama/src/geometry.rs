//! Slide-bag geometry: anchor clustering, distance buckets, polar bins, and
//! the `.pamb` bag file format.
//!
//! A bag's spatial side is S = {coords, anchors, D, P}: anchors are k-means
//! centers over the patch grid coordinates (one anchor per `c` patches,
//! minimum one), `D[i][j]` is the rounded Euclidean distance from anchor `i`
//! to patch `j` capped at `d_max`, and `P[i][j]` is the polar-angle bin of
//! patch `j` seen from anchor `i`, with bin 0 starting at the horizontal
//! axis.
//!
//! Everything here is exact-integer arithmetic where it matters: cluster
//! centers are kept as coordinate sums plus a count rather than floating
//! means, so distances and angles are computed from integer numerators and
//! the derived D/P matrices are bitwise stable under coordinate translation
//! (and under lattice-exact rotation, which the tests rely on).

use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bytesio::Cursor;
use crate::seed::{self, stream};
use crate::tensor::IndexMatrix;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid geometry config: {0}")]
    InvalidConfig(String),
    #[error("bag must contain at least one patch")]
    EmptyBag,
    #[error("duplicate patch coordinates at index {index}")]
    DuplicateCoordinates { index: usize },
    #[error("feature matrix has {got} values, expected {expected} (n_p x d_f)")]
    FeatureShape { expected: usize, got: usize },
}

/// Errors from reading or writing `.pamb` files. Parse failures carry the
/// byte offset at which the file stopped making sense.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic at offset {offset}: expected \"PAMB\", found {found:?}")]
    BadMagic { offset: usize, found: [u8; 4] },
    #[error("unsupported bag version {found} at offset {offset} (supported: 1)")]
    UnsupportedVersion { offset: usize, found: u32 },
    #[error("truncated bag file: needed {needed} more bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("trailing {extra} bytes after payload at offset {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("stored bag invalid: {0}")]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<crate::bytesio::OutOfData> for FormatError {
    fn from(e: crate::bytesio::OutOfData) -> Self {
        FormatError::Truncated { offset: e.offset, needed: e.needed }
    }
}

fn default_patches_per_anchor() -> u32 {
    144
}
fn default_polar_bins() -> u32 {
    8
}
fn default_d_max() -> u32 {
    32
}
fn default_kmeans_iters() -> u32 {
    50
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    /// Expected patches per anchor (`c`): a bag gets `max(1, n_p / c)` anchors.
    #[serde(default = "default_patches_per_anchor")]
    pub patches_per_anchor: u32,
    /// Polar sector count `N`; bin width is `2π/N`.
    #[serde(default = "default_polar_bins")]
    pub polar_bins: u32,
    /// Distance bucket cap; buckets run 0..=d_max.
    #[serde(default = "default_d_max")]
    pub d_max: u32,
    #[serde(default = "default_kmeans_iters")]
    pub kmeans_iters: u32,
    #[serde(default)]
    pub seed: u64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            patches_per_anchor: 144,
            polar_bins: 8,
            d_max: 32,
            kmeans_iters: 50,
            seed: 0,
        }
    }
}

impl GeometryConfig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.polar_bins < 2 {
            return Err(GeometryError::InvalidConfig(format!(
                "polar_bins must be >= 2, got {}",
                self.polar_bins
            )));
        }
        if self.d_max < 1 {
            return Err(GeometryError::InvalidConfig("d_max must be >= 1".into()));
        }
        if self.patches_per_anchor < 1 {
            return Err(GeometryError::InvalidConfig(
                "patches_per_anchor must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Cluster centroid held as exact integer sums (`center = sums / count`).
/// Distances and angles to a patch are derived from the integer numerators
/// `col·count − sum_cols`, which is what makes D/P translation-stable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Anchor {
    pub sum_cols: i64,
    pub sum_rows: i64,
    pub count: i64,
}

impl Anchor {
    fn from_point(p: (i32, i32)) -> Self {
        Anchor { sum_cols: p.0 as i64, sum_rows: p.1 as i64, count: 1 }
    }

    /// Centroid as floats (for display and CSV export).
    pub fn center(&self) -> (f64, f64) {
        (
            self.sum_cols as f64 / self.count as f64,
            self.sum_rows as f64 / self.count as f64,
        )
    }

    /// Integer numerators of (patch − center), scaled by `count`.
    fn delta(&self, p: (i32, i32)) -> (i64, i64) {
        (
            p.0 as i64 * self.count - self.sum_cols,
            p.1 as i64 * self.count - self.sum_rows,
        )
    }

    /// Squared distance from this centroid to a patch, in grid units.
    fn dist2(&self, p: (i32, i32)) -> f64 {
        let (nx, ny) = self.delta(p);
        let (nxf, nyf) = (nx as f64, ny as f64);
        (nxf * nxf + nyf * nyf) / (self.count as f64 * self.count as f64)
    }
}

/// `n_k = max(1, floor(n_p / c))`.
pub fn anchor_count(n_p: usize, patches_per_anchor: u32) -> usize {
    (n_p / patches_per_anchor as usize).max(1)
}

/// k-means over grid coordinates: k-means++ seeding, Lloyd iterations with
/// ties broken toward the lowest center index, empty clusters re-seeded to
/// the point currently farthest from its assigned center. Deterministic
/// under `rng_seed`.
pub fn cluster_anchors(
    coords: &[(i32, i32)],
    k: usize,
    iters: u32,
    rng_seed: u64,
) -> Vec<Anchor> {
    assert!(k >= 1 && k <= coords.len(), "k must be in [1, n_p]");
    use rand::Rng;
    let mut rng = seed::rng(rng_seed, &[stream::GEOMETRY]);

    // k-means++: first center uniform, the rest weighted by squared distance
    // to the nearest already-chosen center.
    let mut centers: Vec<Anchor> = Vec::with_capacity(k);
    let first = rng.gen_range(0..coords.len());
    centers.push(Anchor::from_point(coords[first]));
    let mut best_d2: Vec<f64> = coords.iter().map(|&p| centers[0].dist2(p)).collect();
    while centers.len() < k {
        let total: f64 = best_d2.iter().sum();
        let chosen = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = 0;
            for (j, &w) in best_d2.iter().enumerate() {
                u -= w;
                pick = j;
                if u <= 0.0 {
                    break;
                }
            }
            pick
        } else {
            // all remaining mass zero (coincident points); take the first
            // index not yet a center
            (0..coords.len())
                .find(|&j| best_d2[j] > 0.0)
                .unwrap_or(centers.len())
        };
        let c = Anchor::from_point(coords[chosen]);
        for (j, &p) in coords.iter().enumerate() {
            best_d2[j] = best_d2[j].min(c.dist2(p));
        }
        centers.push(c);
    }

    // Lloyd iterations on exact centroid sums.
    let mut assign = vec![usize::MAX; coords.len()];
    for _ in 0..iters {
        let mut changed = false;
        for (j, &p) in coords.iter().enumerate() {
            let mut best = 0;
            let mut best_d = centers[0].dist2(p);
            for (i, c) in centers.iter().enumerate().skip(1) {
                let d = c.dist2(p);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            if assign[j] != best {
                assign[j] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![(0i64, 0i64, 0i64); k];
        for (j, &p) in coords.iter().enumerate() {
            let s = &mut sums[assign[j]];
            s.0 += p.0 as i64;
            s.1 += p.1 as i64;
            s.2 += 1;
        }
        // re-seed empty clusters to the farthest-from-center points, one
        // distinct point per empty cluster, farthest first
        let empties: Vec<usize> = (0..k).filter(|&i| sums[i].2 == 0).collect();
        if !empties.is_empty() {
            let mut by_dist: Vec<(usize, f64)> = coords
                .iter()
                .enumerate()
                .map(|(j, &p)| (j, centers[assign[j]].dist2(p)))
                .collect();
            by_dist.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            for (slot, &cluster) in empties.iter().enumerate() {
                let (j, _) = by_dist[slot];
                let p = coords[j];
                sums[cluster] = (p.0 as i64, p.1 as i64, 1);
            }
        }
        for (i, s) in sums.iter().enumerate() {
            centers[i] = Anchor { sum_cols: s.0, sum_rows: s.1, count: s.2 };
        }
    }
    centers
}

/// `D[i][j] = min(d_max, round(euclidean(anchor_i, patch_j)))` in grid units.
pub fn quantize_distance(
    coords: &[(i32, i32)],
    anchors: &[Anchor],
    d_max: u32,
) -> IndexMatrix {
    assert!(!anchors.is_empty());
    let mut data = Vec::with_capacity(anchors.len() * coords.len());
    for a in anchors {
        for &p in coords {
            let d = a.dist2(p).sqrt();
            let bucket = d.round() as u32;
            data.push(bucket.min(d_max));
        }
    }
    IndexMatrix::new(anchors.len(), coords.len(), data).expect("shape by construction")
}

/// Polar bin of the direction `(nx, ny)` with `n_bins` sectors of width
/// `2π/n_bins` starting at the +x axis. `(0, 0)` maps to bin 0 by convention.
///
/// Directions lying exactly on an axis or a diagonal are binned by integer
/// arithmetic — those are the only directions a square lattice can hit
/// exactly on sector boundaries, so boundary membership never depends on
/// `atan2` rounding. All other directions sit far enough inside a sector
/// that the float path is unambiguous.
pub fn polar_bin(nx: i64, ny: i64, n_bins: u32) -> u32 {
    if nx == 0 && ny == 0 {
        return 0;
    }
    // eighth-turn index for the exact lattice directions
    let eighth: Option<u64> = if ny == 0 {
        Some(if nx > 0 { 0 } else { 4 })
    } else if nx == 0 {
        Some(if ny > 0 { 2 } else { 6 })
    } else if nx.abs() == ny.abs() {
        Some(match (nx > 0, ny > 0) {
            (true, true) => 1,
            (false, true) => 3,
            (false, false) => 5,
            (true, false) => 7,
        })
    } else {
        None
    };
    if let Some(e) = eighth {
        // angle = e·(π/4) = e/8 turn → bin floor(N·e/8)
        return (n_bins as u64 * e / 8) as u32;
    }
    let mut angle = (ny as f64).atan2(nx as f64);
    if angle < 0.0 {
        angle += 2.0 * PI;
    }
    let bin = (angle * n_bins as f64 / (2.0 * PI)).floor() as u32;
    bin.min(n_bins - 1)
}

/// `P[i][j]` = polar bin of patch `j` as seen from anchor `i`.
pub fn polar_bins(coords: &[(i32, i32)], anchors: &[Anchor], n_bins: u32) -> IndexMatrix {
    assert!(!anchors.is_empty());
    let mut data = Vec::with_capacity(anchors.len() * coords.len());
    for a in anchors {
        for &p in coords {
            let (nx, ny) = a.delta(p);
            data.push(polar_bin(nx, ny, n_bins));
        }
    }
    IndexMatrix::new(anchors.len(), coords.len(), data).expect("shape by construction")
}

/// One slide: patch coordinates and features plus the derived spatial
/// structure (anchors, D, P). Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideBag {
    /// `(col, row)` grid positions, unique per bag.
    pub coords: Vec<(i32, i32)>,
    /// `n_p × d_f` patch features, row-major. Stored as f32; the model
    /// widens to f64 at the tape boundary.
    pub features: Vec<f32>,
    pub d_f: usize,
    pub label: Option<u32>,
    pub config: GeometryConfig,
    pub anchors: Vec<Anchor>,
    /// `n_k × n_p` distance buckets.
    pub dist: IndexMatrix,
    /// `n_k × n_p` polar bins (geometric initialization: horizontal axis).
    pub polar: IndexMatrix,
}

impl SlideBag {
    pub fn n_patches(&self) -> usize {
        self.coords.len()
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn feature_row(&self, i: usize) -> &[f32] {
        &self.features[i * self.d_f..(i + 1) * self.d_f]
    }
}

/// Clusters anchors and derives D/P for the given patches.
pub fn build_bag(
    coords: Vec<(i32, i32)>,
    features: Vec<f32>,
    d_f: usize,
    label: Option<u32>,
    config: GeometryConfig,
) -> Result<SlideBag, GeometryError> {
    config.validate()?;
    if coords.is_empty() {
        return Err(GeometryError::EmptyBag);
    }
    if d_f == 0 || features.len() != coords.len() * d_f {
        return Err(GeometryError::FeatureShape {
            expected: coords.len() * d_f.max(1),
            got: features.len(),
        });
    }
    let mut seen = std::collections::HashSet::with_capacity(coords.len());
    for (i, &p) in coords.iter().enumerate() {
        if !seen.insert(p) {
            return Err(GeometryError::DuplicateCoordinates { index: i });
        }
    }
    let k = anchor_count(coords.len(), config.patches_per_anchor);
    let anchors = cluster_anchors(&coords, k, config.kmeans_iters, config.seed);
    let dist = quantize_distance(&coords, &anchors, config.d_max);
    let polar = polar_bins(&coords, &anchors, config.polar_bins);
    Ok(SlideBag { coords, features, d_f, label, config, anchors, dist, polar })
}

// ── .pamb file format ───────────────────────────────────────────────────
// Little-endian throughout: magic "PAMB", u32 version=1, u32 n_p, u32 d_f,
// u32 label (0xFFFFFFFF = unlabeled), u32 c, u32 N, u32 d_max, u64 seed,
// then n_p × (i32 col, i32 row), then n_p·d_f f32 features row-major.
// Anchors/D/P are derived data and are recomputed at load time.

const BAG_MAGIC: &[u8; 4] = b"PAMB";
const BAG_VERSION: u32 = 1;
const NO_LABEL: u32 = 0xFFFF_FFFF;

pub fn bag_to_bytes(bag: &SlideBag) -> Vec<u8> {
    let mut out = Vec::with_capacity(40 + bag.coords.len() * 8 + bag.features.len() * 4);
    out.extend_from_slice(BAG_MAGIC);
    out.extend_from_slice(&BAG_VERSION.to_le_bytes());
    out.extend_from_slice(&(bag.n_patches() as u32).to_le_bytes());
    out.extend_from_slice(&(bag.d_f as u32).to_le_bytes());
    out.extend_from_slice(&bag.label.unwrap_or(NO_LABEL).to_le_bytes());
    out.extend_from_slice(&bag.config.patches_per_anchor.to_le_bytes());
    out.extend_from_slice(&bag.config.polar_bins.to_le_bytes());
    out.extend_from_slice(&bag.config.d_max.to_le_bytes());
    out.extend_from_slice(&bag.config.seed.to_le_bytes());
    for &(c, r) in &bag.coords {
        out.extend_from_slice(&c.to_le_bytes());
        out.extend_from_slice(&r.to_le_bytes());
    }
    for &f in &bag.features {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out
}

pub fn save_bag(bag: &SlideBag, path: &Path) -> Result<(), FormatError> {
    let mut file = fs::File::create(path)?;
    file.write_all(&bag_to_bytes(bag))?;
    Ok(())
}

/// Parses a bag image; anchors/D/P are rebuilt from the stored header
/// fields (the iteration cap is not stored and takes its default).
pub fn bag_from_bytes(buf: &[u8]) -> Result<SlideBag, FormatError> {
    let mut cur = Cursor::new(buf);
    let magic_off = cur.offset();
    let magic = cur.take(4)?;
    if magic != BAG_MAGIC {
        return Err(FormatError::BadMagic {
            offset: magic_off,
            found: magic.try_into().unwrap(),
        });
    }
    let version_off = cur.offset();
    let version = cur.u32()?;
    if version != BAG_VERSION {
        return Err(FormatError::UnsupportedVersion { offset: version_off, found: version });
    }
    let n_p = cur.u32()? as usize;
    let d_f = cur.u32()? as usize;
    let label_raw = cur.u32()?;
    let config = GeometryConfig {
        patches_per_anchor: cur.u32()?,
        polar_bins: cur.u32()?,
        d_max: cur.u32()?,
        kmeans_iters: default_kmeans_iters(),
        seed: cur.u64()?,
    };
    let mut coords = Vec::with_capacity(n_p);
    for _ in 0..n_p {
        let c = cur.i32()?;
        let r = cur.i32()?;
        coords.push((c, r));
    }
    let mut features = Vec::with_capacity(n_p * d_f);
    for _ in 0..n_p * d_f {
        features.push(cur.f32()?);
    }
    if cur.remaining() > 0 {
        return Err(FormatError::TrailingBytes {
            offset: cur.offset(),
            extra: cur.remaining(),
        });
    }
    let label = if label_raw == NO_LABEL { None } else { Some(label_raw) };
    Ok(build_bag(coords, features, d_f, label, config)?)
}

pub fn load_bag(path: &Path) -> Result<SlideBag, FormatError> {
    bag_from_bytes(&fs::read(path)?)
}
