//! Synthetic hierarchical shapes, point-cloud augmentation, and the view
//! rasteriser.
//!
//! A dataset is grown from a tree of shape prototypes. The root prototype
//! is a handful of primitive parts (ellipsoids, boxes, cylinders); every
//! child copies its parent and perturbs part positions and extents with a
//! level-dependent scale. Leaves emit noisy samples, so clouds that share
//! more ancestors look more alike.
//!
//! All randomness flows from seeds combined with [`hash64`], which makes
//! per-sample work order-independent.

use std::f64::consts::PI;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use thiserror::Error;

use crate::encoders::{PointCloud, ViewImage};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid hierarchy: {0}")]
    Spec(String),
    #[error("bad dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Encode(#[from] crate::encoders::EncodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

const MAGIC: &[u8; 8] = b"HIPCDATA";
const VERSION: u32 = 1;

/// Mixes a seed with a list of integers (splitmix64 finaliser per word).
pub fn hash64(seed: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(seed), |h, &p| mix(h ^ mix(p)))
}

/// Seed of one augmentation or view of one sample in one epoch.
pub fn sample_seed(global: u64, sample_id: u64, epoch: u64, view: u64) -> u64 {
    hash64(global, &[sample_id, epoch, view])
}

/// Shape of the prototype tree and of the emitted samples.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchySpec {
    /// Levels including the root; leaves sit at level `depth - 1`.
    pub depth: usize,
    pub branching: usize,
    pub samples_per_leaf: usize,
    pub points_per_cloud: usize,
    /// Deformation scale applied when moving from level `l` to `l + 1`.
    pub level_noise: Vec<f64>,
    /// Per-sample jitter of part positions and log-extents.
    pub sample_noise: f64,
    /// Gaussian noise on every surface point.
    pub point_noise: f64,
    /// Give every sample an independent uniformly random orientation.
    pub random_pose: bool,
}

impl Default for HierarchySpec {
    fn default() -> Self {
        Self {
            depth: 3,
            branching: 3,
            samples_per_leaf: 40,
            points_per_cloud: 256,
            level_noise: vec![0.3, 0.15],
            sample_noise: 0.03,
            point_noise: 0.01,
            random_pose: true,
        }
    }
}

impl HierarchySpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(DataError::Spec(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.branching < 2 {
            return Err(DataError::Spec(format!("branching must be >= 2, got {}", self.branching)));
        }
        if self.points_per_cloud < crate::encoders::MIN_POINTS {
            return Err(DataError::Spec(format!(
                "points per cloud must be >= {}",
                crate::encoders::MIN_POINTS
            )));
        }
        if self.level_noise.len() != self.depth - 1 {
            return Err(DataError::Spec(format!(
                "need {} level noise scales, got {}",
                self.depth - 1,
                self.level_noise.len()
            )));
        }
        let scales = self.level_noise.iter().chain([&self.sample_noise, &self.point_noise]);
        if scales.into_iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(DataError::Spec("noise scales must be finite and non-negative".into()));
        }
        let nodes = self.node_count();
        if nodes > 1 << 20 {
            return Err(DataError::Spec(format!("tree too large ({nodes} nodes)")));
        }
        Ok(())
    }

    pub fn leaf_count(&self) -> usize {
        self.branching.pow(self.depth as u32 - 1)
    }

    /// Number of nodes at `level` (root is level 0).
    pub fn level_width(&self, level: usize) -> usize {
        self.branching.pow(level as u32)
    }

    pub fn node_count(&self) -> usize {
        (0..self.depth).map(|l| self.level_width(l)).sum()
    }

    fn level_offset(&self, level: usize) -> usize {
        (0..level).map(|l| self.level_width(l)).sum()
    }

    /// Breadth-first ids from the root to node `index` of `level`.
    pub fn path_to(&self, level: usize, index: usize) -> Vec<u32> {
        (0..=level)
            .map(|l| {
                let idx = index / self.branching.pow((level - l) as u32);
                (self.level_offset(l) + idx) as u32
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PartKind {
    Ellipsoid,
    Cuboid,
    Cylinder,
}

#[derive(Debug, Clone, PartialEq)]
struct Part {
    kind: PartKind,
    center: [f64; 3],
    half: [f64; 3],
}

const ROOT_PARTS: usize = 4;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn perturb(parts: &[Part], scale: f64, rng: &mut ChaCha8Rng) -> Vec<Part> {
    parts
        .iter()
        .map(|p| Part {
            kind: p.kind,
            center: p.center.map(|v| v + scale * gaussian(rng)),
            half: p.half.map(|v| (v * (scale * gaussian(rng)).exp()).clamp(0.05, 1.0)),
        })
        .collect()
}

/// Prototypes of every node, stored breadth-first.
#[derive(Debug, Clone)]
struct PrototypeTree {
    nodes: Vec<Vec<Part>>,
}

impl PrototypeTree {
    fn build(spec: &HierarchySpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(hash64(seed, &[0x70726f746f]));
        let kinds = [PartKind::Ellipsoid, PartKind::Cuboid, PartKind::Cylinder];
        let root: Vec<Part> = (0..ROOT_PARTS)
            .map(|_| Part {
                kind: kinds[rng.random_range(0..kinds.len())],
                center: [0; 3].map(|_: u8| rng.random_range(-0.45..0.45)),
                half: [0; 3].map(|_: u8| rng.random_range(0.15..0.45)),
            })
            .collect();
        let mut nodes = vec![root];
        for level in 1..spec.depth {
            let scale = spec.level_noise[level - 1];
            let parent_start = spec.level_offset(level - 1);
            for i in 0..spec.level_width(level) {
                let parent = nodes[parent_start + i / spec.branching].clone();
                let child = perturb(&parent, scale, &mut rng);
                nodes.push(child);
            }
        }
        Self { nodes }
    }
}

fn surface_point(part: &Part, rng: &mut ChaCha8Rng) -> [f64; 3] {
    let [hx, hy, hz] = part.half;
    let local = match part.kind {
        PartKind::Ellipsoid => {
            let u = unit_vector(rng);
            [hx * u[0], hy * u[1], hz * u[2]]
        }
        PartKind::Cuboid => {
            let areas = [hy * hz, hx * hz, hx * hy];
            let total: f64 = areas.iter().sum();
            let mut pick = rng.random_range(0.0..total);
            let mut axis = 2;
            for (k, a) in areas.iter().enumerate() {
                if pick < *a {
                    axis = k;
                    break;
                }
                pick -= a;
            }
            let mut p = [
                rng.random_range(-hx..hx),
                rng.random_range(-hy..hy),
                rng.random_range(-hz..hz),
            ];
            p[axis] = if rng.random_bool(0.5) { part.half[axis] } else { -part.half[axis] };
            p
        }
        PartKind::Cylinder => {
            let r = 0.5 * (hx + hy);
            let side = 2.0 * PI * r * 2.0 * hz;
            let caps = 2.0 * PI * r * r;
            let theta = rng.random_range(0.0..2.0 * PI);
            if rng.random_range(0.0..side + caps) < side {
                [hx * theta.cos(), hy * theta.sin(), rng.random_range(-hz..hz)]
            } else {
                let s = rng.random::<f64>().sqrt();
                let z = if rng.random_bool(0.5) { hz } else { -hz };
                [hx * s * theta.cos(), hy * s * theta.sin(), z]
            }
        }
    };
    [
        part.center[0] + local[0],
        part.center[1] + local[1],
        part.center[2] + local[2],
    ]
}

fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v = [gaussian(rng), gaussian(rng), gaussian(rng)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-12 {
            return v.map(|x| x / n);
        }
    }
}

/// Uniformly distributed rotation matrix (random unit quaternion).
pub fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (
        a * (2.0 * PI * u2).sin(),
        a * (2.0 * PI * u2).cos(),
        b * (2.0 * PI * u3).sin(),
        b * (2.0 * PI * u3).cos(),
    );
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn rotate(m: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2])
}

fn emit(spec: &HierarchySpec, proto: &[Part], seed: u64) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parts = perturb(proto, spec.sample_noise, &mut rng);
    let noise = Normal::new(0.0, spec.point_noise).expect("validated noise scale");
    let mut pts: Vec<[f64; 3]> = (0..spec.points_per_cloud)
        .map(|j| {
            let p = surface_point(&parts[j % parts.len()], &mut rng);
            p.map(|v| v + noise.sample(&mut rng))
        })
        .collect();
    let n = pts.len() as f64;
    let mean = [0, 1, 2].map(|k| pts.iter().map(|p| p[k]).sum::<f64>() / n);
    for p in &mut pts {
        for k in 0..3 {
            p[k] -= mean[k];
        }
    }
    if spec.random_pose {
        let m = random_rotation(&mut rng);
        for p in &mut pts {
            *p = rotate(&m, *p);
        }
    }
    PointCloud::new(pts).expect("generated clouds are valid")
}

/// One generated cloud with its place in the tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub cloud: PointCloud,
    /// Class label: leaf index for dataset samples, node id for
    /// [`gen_multilevel`] samples.
    pub label: usize,
    /// Breadth-first node ids from the root to the emitting node.
    pub ancestor_path: Vec<u32>,
}

impl Sample {
    /// Depth of the emitting node (root = 0).
    pub fn level(&self) -> usize {
        self.ancestor_path.len() - 1
    }
}

/// A generated dataset with the `HierarchySpec` and seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: HierarchySpec,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

/// `samples_per_leaf` clouds for every leaf, ordered by leaf then index.
pub fn gen_dataset(spec: &HierarchySpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let tree = PrototypeTree::build(spec, seed);
    let leaf_level = spec.depth - 1;
    let leaf_start = spec.level_offset(leaf_level);
    let mut samples = Vec::with_capacity(spec.leaf_count() * spec.samples_per_leaf);
    for leaf in 0..spec.leaf_count() {
        let path = spec.path_to(leaf_level, leaf);
        for k in 0..spec.samples_per_leaf {
            let id = samples.len() as u64;
            let cloud = emit(spec, &tree.nodes[leaf_start + leaf], hash64(seed, &[1, leaf as u64, k as u64]));
            samples.push(Sample {
                id,
                cloud,
                label: leaf,
                ancestor_path: path.clone(),
            });
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        samples,
    })
}

/// `per_node` clouds from every node of the tree, internal nodes included.
///
/// Uses the same prototype tree as [`gen_dataset`] with the same seed, so
/// internal nodes are the common ancestors of that dataset's classes.
pub fn gen_multilevel(spec: &HierarchySpec, seed: u64, per_node: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    let tree = PrototypeTree::build(spec, seed);
    let mut out = Vec::new();
    for level in 0..spec.depth {
        for index in 0..spec.level_width(level) {
            let node = spec.level_offset(level) + index;
            let path = spec.path_to(level, index);
            for k in 0..per_node {
                out.push(Sample {
                    id: out.len() as u64,
                    cloud: emit(spec, &tree.nodes[node], hash64(seed, &[2, node as u64, k as u64])),
                    label: node,
                    ancestor_path: path.clone(),
                });
            }
        }
    }
    Ok(out)
}

/// Ranges of the point-cloud augmentations.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    pub rotate: bool,
    pub scale: (f64, f64),
    pub translate: f64,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
    /// Subsample to this many points when the cloud is larger.
    pub max_points: Option<usize>,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            rotate: true,
            scale: (0.8, 1.25),
            translate: 0.2,
            jitter_sigma: 0.01,
            jitter_clip: 0.05,
            max_points: Some(256),
        }
    }
}

impl AugmentParams {
    /// Every transformation disabled.
    pub fn identity() -> Self {
        Self {
            rotate: false,
            scale: (1.0, 1.0),
            translate: 0.0,
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
            max_points: None,
        }
    }
}

/// Rotation, isotropic scale, translation, clipped jitter, subsampling,
/// in that order.
pub fn augment(cloud: &PointCloud, seed: u64, aug: &AugmentParams) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rot = aug.rotate.then(|| random_rotation(&mut rng));
    let s = if aug.scale.0 < aug.scale.1 {
        rng.random_range(aug.scale.0..=aug.scale.1)
    } else {
        aug.scale.0
    };
    let shift = [0; 3].map(|_: u8| {
        if aug.translate > 0.0 {
            rng.random_range(-aug.translate..=aug.translate)
        } else {
            0.0
        }
    });
    let mut pts: Vec<[f64; 3]> = cloud
        .points()
        .iter()
        .map(|p| {
            let p = rot.as_ref().map_or(*p, |m| rotate(m, *p));
            [0, 1, 2].map(|k| s * p[k] + shift[k])
        })
        .collect();
    if aug.jitter_sigma > 0.0 {
        for p in &mut pts {
            for v in p.iter_mut() {
                let j: f64 = gaussian(&mut rng) * aug.jitter_sigma;
                *v += j.clamp(-aug.jitter_clip, aug.jitter_clip);
            }
        }
    }
    if let Some(m) = aug.max_points {
        if pts.len() > m {
            let mut keep = sample_indices(&mut rng, pts.len(), m).into_vec();
            keep.sort_unstable();
            pts = keep.into_iter().map(|i| pts[i]).collect();
        }
    }
    PointCloud::new(pts).expect("augmentation keeps clouds valid")
}

/// Camera direction for the rasteriser.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct View {
    pub azimuth: f64,
    pub elevation: f64,
}

impl View {
    /// Azimuth uniform on `[0, 2pi)`, elevation uniform on `[-pi/2, pi/2]`.
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            azimuth: rng.random_range(0.0..2.0 * PI),
            elevation: rng.random_range(-PI / 2.0..=PI / 2.0),
        }
    }
}

/// Half-width of the orthographic frame in object units.
pub const FRAME_EXTENT: f64 = 1.5;

/// Orthographic depth image. The camera looks down the view-frame `-z`
/// axis; each occupied cell stores the normalised height of its nearest
/// point, clamped away from zero so that occupied cells stay nonzero.
pub fn rasterize(cloud: &PointCloud, view: View, height: usize, width: usize) -> ViewImage {
    let (sa, ca) = view.azimuth.sin_cos();
    let (se, ce) = view.elevation.sin_cos();
    let mut grid = vec![0.0; height * width];
    for p in cloud.points() {
        // rotate about z by -azimuth, then about x by -elevation
        let x1 = ca * p[0] + sa * p[1];
        let y1 = -sa * p[0] + ca * p[1];
        let z1 = p[2];
        let y2 = ce * y1 + se * z1;
        let z2 = -se * y1 + ce * z1;
        let u = (x1 + FRAME_EXTENT) / (2.0 * FRAME_EXTENT);
        let v = (FRAME_EXTENT - y2) / (2.0 * FRAME_EXTENT);
        if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
            continue;
        }
        let col = (u * width as f64) as usize;
        let row = (v * height as f64) as usize;
        let depth = ((z2 + FRAME_EXTENT) / (2.0 * FRAME_EXTENT)).clamp(1e-3, 1.0);
        let cell = &mut grid[row * width + col];
        if depth > *cell {
            *cell = depth;
        }
    }
    ViewImage::new(height, width, grid).expect("depths lie in [0, 1]")
}

/// Random horizontal flip plus a shift of up to `max_shift` pixels with
/// zero fill.
pub fn augment_image(img: &ViewImage, seed: u64, max_shift: usize) -> ViewImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flip = rng.random_bool(0.5);
    let m = max_shift as i64;
    let (dr, dc) = (rng.random_range(-m..=m), rng.random_range(-m..=m));
    let (h, w) = (img.height(), img.width());
    let mut grid = vec![0.0; h * w];
    for r in 0..h as i64 {
        for c in 0..w as i64 {
            let (sr, sc) = (r - dr, c - dc);
            if sr < 0 || sc < 0 || sr >= h as i64 || sc >= w as i64 {
                continue;
            }
            let sc = if flip { w as i64 - 1 - sc } else { sc };
            grid[(r * w as i64 + c) as usize] = img.get(sr as usize, sc as usize);
        }
    }
    ViewImage::new(h, w, grid).expect("values copied from a valid image")
}

/// Symmetric chamfer distance with squared point distances.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> f64 {
    fn one_way(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
        a.iter()
            .map(|p| {
                b.iter()
                    .map(|q| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2))
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / a.len() as f64
    }
    one_way(a.points(), b.points()) + one_way(b.points(), a.points())
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.samples.iter().map(|s| s.label + 1).max().unwrap_or(0)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let s = &self.spec;
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        for v in [s.depth, s.branching, s.samples_per_leaf, s.points_per_cloud] {
            w.write_u32::<LittleEndian>(v as u32)?;
        }
        w.write_u32::<LittleEndian>(s.level_noise.len() as u32)?;
        for v in s.level_noise.iter().chain([&s.sample_noise, &s.point_noise]) {
            w.write_f64::<LittleEndian>(*v)?;
        }
        w.write_u8(s.random_pose as u8)?;
        w.write_u64::<LittleEndian>(self.seed)?;
        w.write_u64::<LittleEndian>(self.samples.len() as u64)?;
        for smp in &self.samples {
            w.write_u64::<LittleEndian>(smp.id)?;
            w.write_u32::<LittleEndian>(smp.label as u32)?;
            w.write_u32::<LittleEndian>(smp.ancestor_path.len() as u32)?;
            for n in &smp.ancestor_path {
                w.write_u32::<LittleEndian>(*n)?;
            }
            w.write_u32::<LittleEndian>(smp.cloud.len() as u32)?;
            for v in smp.cloud.points().iter().flatten() {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DataError::Format("not a dataset file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(DataError::Format(format!("unsupported version {version}")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>()? as usize;
        }
        let n_levels = r.read_u32::<LittleEndian>()? as usize;
        if n_levels > 64 {
            return Err(DataError::Format("implausible depth".into()));
        }
        let mut level_noise = vec![0.0; n_levels];
        r.read_f64_into::<LittleEndian>(&mut level_noise)?;
        let sample_noise = r.read_f64::<LittleEndian>()?;
        let point_noise = r.read_f64::<LittleEndian>()?;
        let random_pose = r.read_u8()? != 0;
        let spec = HierarchySpec {
            depth: dims[0],
            branching: dims[1],
            samples_per_leaf: dims[2],
            points_per_cloud: dims[3],
            level_noise,
            sample_noise,
            point_noise,
            random_pose,
        };
        spec.validate()?;
        let seed = r.read_u64::<LittleEndian>()?;
        let n = r.read_u64::<LittleEndian>()? as usize;
        let mut samples = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let id = r.read_u64::<LittleEndian>()?;
            let label = r.read_u32::<LittleEndian>()? as usize;
            let plen = r.read_u32::<LittleEndian>()? as usize;
            if plen == 0 || plen > 64 {
                return Err(DataError::Format(format!("bad path length {plen}")));
            }
            let ancestor_path = (0..plen)
                .map(|_| r.read_u32::<LittleEndian>())
                .collect::<std::io::Result<Vec<_>>>()?;
            let m = r.read_u32::<LittleEndian>()? as usize;
            let mut flat = vec![0.0; m * 3];
            r.read_f64_into::<LittleEndian>(&mut flat)?;
            let pts = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            samples.push(Sample {
                id,
                cloud: PointCloud::new(pts)?,
                label,
                ancestor_path,
            });
        }
        Ok(Self { spec, seed, samples })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let d = Self::read_from(&mut r)?;
        if r.fill_buf()?.is_empty() {
            Ok(d)
        } else {
            Err(DataError::Format("trailing bytes after last sample".into()))
        }
    }

    /// One line per sample: `id label path`, path ids joined by `/`.
    pub fn listing(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            let path: Vec<String> = s.ancestor_path.iter().map(u32::to_string).collect();
            out.push_str(&format!("{} {} {}\n", s.id, s.label, path.join("/")));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(depth: usize, branching: usize, per_leaf: usize) -> HierarchySpec {
        let mut level_noise = vec![0.3, 0.15, 0.08];
        level_noise.truncate(depth - 1);
        HierarchySpec {
            depth,
            branching,
            samples_per_leaf: per_leaf,
            points_per_cloud: 64,
            level_noise,
            ..HierarchySpec::default()
        }
    }

    #[test]
    fn counts_and_paths() {
        let d = gen_dataset(&small(2, 2, 10), 1).unwrap();
        assert_eq!(d.len(), 20);
        assert_eq!(d.num_classes(), 2);
        let spec = small(3, 3, 1);
        assert_eq!(spec.node_count(), 13);
        assert_eq!(spec.path_to(2, 0), vec![0, 1, 4]);
        assert_eq!(spec.path_to(2, 5), vec![0, 2, 9]);
        assert_eq!(spec.path_to(2, 8), vec![0, 3, 12]);
        let d = gen_dataset(&spec, 3).unwrap();
        for s in &d.samples {
            assert_eq!(s.ancestor_path.len(), 3);
            assert_eq!(s.ancestor_path[2] as usize, 4 + s.label);
        }
        let ml = gen_multilevel(&spec, 3, 2).unwrap();
        assert_eq!(ml.len(), 26);
        assert_eq!(ml.iter().filter(|s| s.level() == 0).count(), 2);
        assert_eq!(ml.iter().filter(|s| s.level() == 2).count(), 18);
    }

    #[test]
    fn spec_validation() {
        assert!(gen_dataset(&small(2, 1, 4), 0).is_err());
        let mut s = small(3, 2, 2);
        s.level_noise.pop();
        assert!(gen_dataset(&s, 0).is_err());
        s = small(3, 2, 2);
        s.points_per_cloud = 4;
        assert!(gen_dataset(&s, 0).is_err());
    }

    #[test]
    fn seeded_generation() {
        let s = small(3, 2, 3);
        assert_eq!(gen_dataset(&s, 11).unwrap(), gen_dataset(&s, 11).unwrap());
        assert_ne!(gen_dataset(&s, 11).unwrap(), gen_dataset(&s, 12).unwrap());
    }

    #[test]
    fn hash_mixes_every_word() {
        let base = sample_seed(1, 2, 3, 0);
        assert_ne!(base, sample_seed(1, 2, 3, 1));
        assert_ne!(base, sample_seed(1, 2, 4, 0));
        assert_ne!(base, sample_seed(1, 3, 3, 0));
        assert_ne!(base, sample_seed(2, 2, 3, 0));
        assert_eq!(base, sample_seed(1, 2, 3, 0));
    }

    #[test]
    fn rotations_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let m = random_rotation(&mut rng);
            for i in 0..3 {
                for j in 0..3 {
                    let d: f64 = (0..3).map(|k| m[i][k] * m[j][k]).sum();
                    assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
                }
            }
            let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            assert!((det - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_augmentation_is_a_no_op() {
        let d = gen_dataset(&small(2, 2, 1), 5).unwrap();
        let c = &d.samples[0].cloud;
        assert_eq!(&augment(c, 77, &AugmentParams::identity()), c);
    }

    #[test]
    fn scale_only_augmentation_scales_norms() {
        let d = gen_dataset(&small(2, 2, 1), 5).unwrap();
        let c = &d.samples[0].cloud;
        let aug = AugmentParams {
            scale: (0.8, 1.25),
            ..AugmentParams::identity()
        };
        let out = augment(c, 9, &aug);
        let norm = |p: &[f64; 3]| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        let s = norm(&out.points()[0]) / norm(&c.points()[0]);
        assert!((0.8..=1.25).contains(&s));
        for (a, b) in out.points().iter().zip(c.points()) {
            assert!((norm(a) - s * norm(b)).abs() < 1e-12);
        }
    }

    #[test]
    fn augmentation_subsamples_and_differs_by_seed() {
        let mut spec = small(2, 2, 1);
        spec.points_per_cloud = 100;
        let d = gen_dataset(&spec, 5).unwrap();
        let c = &d.samples[0].cloud;
        let aug = AugmentParams {
            max_points: Some(64),
            ..AugmentParams::default()
        };
        let a = augment(c, 1, &aug);
        let b = augment(c, 2, &aug);
        assert_eq!(a.len(), 64);
        assert_eq!(a, augment(c, 1, &aug));
        assert!(chamfer(&a, &b) > 0.0);
        assert!(a.points().iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn rasterizer_cases() {
        let mut pts = vec![[0.0; 3]; 8];
        let c = PointCloud::new(pts.clone()).unwrap();
        let img = rasterize(&c, View { azimuth: 0.3, elevation: 0.2 }, 32, 32);
        assert_eq!(img.grid().iter().filter(|v| **v > 0.0).count(), 1);
        assert_eq!(img.get(16, 16), 0.5);

        pts = gen_dataset(&small(2, 2, 1), 8).unwrap().samples[0].cloud.points().to_vec();
        let c = PointCloud::new(pts).unwrap();
        let a = rasterize(&c, View { azimuth: 0.0, elevation: 0.0 }, 32, 32);
        let b = rasterize(&c, View { azimuth: PI / 2.0, elevation: 0.0 }, 32, 32);
        let gap: f64 = a.grid().iter().zip(b.grid()).map(|(x, y)| (x - y).abs()).sum();
        assert!(gap > 0.0);
        for img in [&a, &b] {
            assert!(img.grid().iter().all(|v| (0.0..=1.0).contains(v)));
            // corners are far outside any shape
            assert_eq!(img.get(0, 0), 0.0);
        }
    }

    #[test]
    fn image_augmentation_keeps_range() {
        let c = gen_dataset(&small(2, 2, 1), 8).unwrap().samples[0].cloud.clone();
        let img = rasterize(&c, View { azimuth: 1.0, elevation: 0.5 }, 16, 16);
        let out = augment_image(&img, 3, 2);
        assert!(out.grid().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(augment_image(&img, 3, 0).grid().iter().sum::<f64>() > 0.0);
    }

    #[test]
    fn chamfer_of_identical_clouds_is_zero() {
        let c = gen_dataset(&small(2, 2, 1), 8).unwrap().samples[0].cloud.clone();
        assert_eq!(chamfer(&c, &c), 0.0);
    }

    #[test]
    fn dataset_roundtrip_and_listing() {
        let d = gen_dataset(&small(3, 2, 2), 21).unwrap();
        let mut buf = Vec::new();
        d.write_to(&mut buf).unwrap();
        assert_eq!(Dataset::read_from(&mut buf.as_slice()).unwrap(), d);
        buf[0] = b'X';
        assert!(Dataset::read_from(&mut buf.as_slice()).is_err());
        let listing = d.listing();
        assert_eq!(listing.lines().count(), 8);
        assert!(listing.starts_with("0 0 0/1/3\n"));
    }
}
