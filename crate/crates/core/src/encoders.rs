//! Point-set and view encoders, projection heads, and the lift into the
//! ball.
//!
//! The point encoder is a per-point MLP followed by a coordinate-wise max
//! over points and a final affine layer, so it is exactly invariant to row
//! order. The view encoder is a two-layer MLP on the flattened raster. Both
//! feed a two-layer head whose output is read as a tangent vector at the
//! origin and mapped onto the ball with `exp_0`.
//!
//! Parameters live in four flat groups; layer shapes are derived from
//! [`Widths`]. Every affine layer stores its `in x out` weight matrix
//! (row-major) followed by its bias.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{project_to_ball, BallPoint, Curvature};
use crate::grad::{Tape, Var};

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("{what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("point cloud needs at least {min} points, got {got}")]
    TooFewPoints { min: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("image entries must lie in [0, 1]")]
    ImageRange,
    #[error("invalid widths: {0}")]
    Widths(String),
    #[error("bad parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EncodeError>;

/// Smallest accepted cloud.
pub const MIN_POINTS: usize = 8;

/// Unordered set of 3-D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.len() < MIN_POINTS {
            return Err(EncodeError::TooFewPoints {
                min: MIN_POINTS,
                got: points.len(),
            });
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(EncodeError::NonFinite("point cloud"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Row-major `M x 3` coordinates.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn into_points(self) -> Vec<[f64; 3]> {
        self.points
    }
}

/// Rasterised view with entries in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewImage {
    height: usize,
    width: usize,
    grid: Vec<f64>,
}

impl ViewImage {
    pub fn new(height: usize, width: usize, grid: Vec<f64>) -> Result<Self> {
        if grid.len() != height * width {
            return Err(EncodeError::Shape {
                what: "image grid",
                expected: height * width,
                got: grid.len(),
            });
        }
        if grid.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(EncodeError::ImageRange);
        }
        Ok(Self { height, width, grid })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            grid: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.grid[row * self.width + col]
    }
}

/// Layer widths of both branches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Widths {
    /// Hidden widths of the per-point MLP; the last one is max-pooled.
    pub point_hidden: Vec<usize>,
    /// Width of the Euclidean features both encoders emit.
    pub feature: usize,
    /// Side length of the square view image.
    pub image_side: usize,
    pub image_hidden: usize,
    pub head_hidden: usize,
    /// Dimension of the ball embeddings.
    pub ball_dim: usize,
}

impl Default for Widths {
    fn default() -> Self {
        Self {
            point_hidden: vec![64, 128],
            feature: 64,
            image_side: 32,
            image_hidden: 128,
            head_hidden: 64,
            ball_dim: 32,
        }
    }
}

impl Widths {
    pub fn validate(&self) -> Result<()> {
        if self.point_hidden.is_empty() {
            return Err(EncodeError::Widths("point encoder needs a hidden layer".into()));
        }
        let all = self.point_hidden.iter().chain([
            &self.feature,
            &self.image_side,
            &self.image_hidden,
            &self.head_hidden,
            &self.ball_dim,
        ]);
        if all.into_iter().any(|&w| w == 0) {
            return Err(EncodeError::Widths("all widths must be positive".into()));
        }
        Ok(())
    }

    /// `(inputs, outputs)` of every affine layer in `group`.
    pub fn layers(&self, group: Group) -> Vec<(usize, usize)> {
        match group {
            Group::PointEncoder => {
                let mut dims = vec![3];
                dims.extend(&self.point_hidden);
                dims.push(self.feature);
                dims.windows(2).map(|w| (w[0], w[1])).collect()
            }
            Group::ImageEncoder => vec![
                (self.image_side * self.image_side, self.image_hidden),
                (self.image_hidden, self.feature),
            ],
            Group::PointHead | Group::ImageHead => vec![
                (self.feature, self.head_hidden),
                (self.head_hidden, self.ball_dim),
            ],
        }
    }

    pub fn group_len(&self, group: Group) -> usize {
        self.layers(group).iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Parameter groups, each with its own optimiser settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    PointEncoder,
    ImageEncoder,
    PointHead,
    ImageHead,
}

impl Group {
    pub const ALL: [Group; 4] = [
        Group::PointEncoder,
        Group::ImageEncoder,
        Group::PointHead,
        Group::ImageHead,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether the group belongs to the image branch.
    pub fn is_image(self) -> bool {
        matches!(self, Group::ImageEncoder | Group::ImageHead)
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::PointEncoder => "point_encoder",
            Group::ImageEncoder => "image_encoder",
            Group::PointHead => "proj_head_point",
            Group::ImageHead => "proj_head_image",
        }
    }
}

/// Branch selector for the projection head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Point,
    Image,
}

impl Branch {
    fn head(self) -> Group {
        match self {
            Branch::Point => Group::PointHead,
            Branch::Image => Group::ImageHead,
        }
    }
}

/// All trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    widths: Widths,
    groups: [Vec<f64>; 4],
}

impl EncoderParams {
    /// All-zero parameters of the given shape.
    pub fn zeros(widths: Widths) -> Result<Self> {
        widths.validate()?;
        let groups = Group::ALL.map(|g| vec![0.0; widths.group_len(g)]);
        Ok(Self { widths, groups })
    }

    pub fn from_groups(widths: Widths, groups: [Vec<f64>; 4]) -> Result<Self> {
        widths.validate()?;
        for g in Group::ALL {
            let expected = widths.group_len(g);
            if groups[g.index()].len() != expected {
                return Err(EncodeError::Shape {
                    what: g.name(),
                    expected,
                    got: groups[g.index()].len(),
                });
            }
        }
        Ok(Self { widths, groups })
    }

    pub fn widths(&self) -> &Widths {
        &self.widths
    }

    pub fn group(&self, g: Group) -> &[f64] {
        &self.groups[g.index()]
    }

    pub fn group_mut(&mut self, g: Group) -> &mut [f64] {
        &mut self.groups[g.index()]
    }

    pub fn len(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.groups.iter().flatten().all(|v| v.is_finite())
    }

    /// Little-endian dump: widths, then each group as a length-prefixed
    /// array of doubles.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let ws = &self.widths;
        w.write_u32::<LittleEndian>(ws.point_hidden.len() as u32)?;
        for h in &ws.point_hidden {
            w.write_u32::<LittleEndian>(*h as u32)?;
        }
        for v in [ws.feature, ws.image_side, ws.image_hidden, ws.head_hidden, ws.ball_dim] {
            w.write_u32::<LittleEndian>(v as u32)?;
        }
        for g in &self.groups {
            w.write_u64::<LittleEndian>(g.len() as u64)?;
            for v in g {
                w.write_f64::<LittleEndian>(*v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let n_hidden = r.read_u32::<LittleEndian>()? as usize;
        if n_hidden > 64 {
            return Err(EncodeError::Format(format!("implausible layer count {n_hidden}")));
        }
        let point_hidden = (0..n_hidden)
            .map(|_| r.read_u32::<LittleEndian>().map(|v| v as usize))
            .collect::<std::io::Result<Vec<_>>>()?;
        let mut rest = [0usize; 5];
        for v in &mut rest {
            *v = r.read_u32::<LittleEndian>()? as usize;
        }
        let widths = Widths {
            point_hidden,
            feature: rest[0],
            image_side: rest[1],
            image_hidden: rest[2],
            head_hidden: rest[3],
            ball_dim: rest[4],
        };
        widths.validate()?;
        let mut groups: [Vec<f64>; 4] = Default::default();
        for g in Group::ALL {
            let len = r.read_u64::<LittleEndian>()? as usize;
            if len != widths.group_len(g) {
                return Err(EncodeError::Shape {
                    what: g.name(),
                    expected: widths.group_len(g),
                    got: len,
                });
            }
            let mut v = vec![0.0; len];
            r.read_f64_into::<LittleEndian>(&mut v)?;
            groups[g.index()] = v;
        }
        Self::from_groups(widths, groups)
    }
}

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights and biases from a
/// seeded stream.
pub fn init_params(seed: u64, widths: &Widths) -> Result<EncoderParams> {
    let mut params = EncoderParams::zeros(widths.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for g in Group::ALL {
        let layers = widths.layers(g);
        let dst = params.group_mut(g);
        let mut off = 0;
        for (fan_in, out) in layers {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in &mut dst[off..off + fan_in * out + out] {
                *v = rng.random_range(-bound..bound);
            }
            off += fan_in * out + out;
        }
    }
    Ok(params)
}

/// Parameters recorded on a tape, sliced into per-layer `(w, b)` nodes.
#[derive(Debug, Clone)]
pub struct TapeParams {
    pub leaves: [Var; 4],
    layers: [Vec<(Var, Var)>; 4],
}

impl TapeParams {
    /// Records each group as a leaf when `trainable[g]` holds, otherwise as
    /// a constant.
    pub fn record(t: &mut Tape, params: &EncoderParams, trainable: [bool; 4]) -> Self {
        let mut leaves = Vec::with_capacity(4);
        let mut layers: [Vec<(Var, Var)>; 4] = Default::default();
        for g in Group::ALL {
            let value = params.group(g).to_vec();
            let n = value.len();
            let leaf = if trainable[g.index()] {
                t.leaf(value, 1, n)
            } else {
                t.constant(value, 1, n)
            };
            leaves.push(leaf);
            layers[g.index()] = slice_layers(t, leaf, &params.widths().layers(g));
        }
        let leaves = [leaves[0], leaves[1], leaves[2], leaves[3]];
        Self { leaves, layers }
    }

    pub fn layers(&self, g: Group) -> &[(Var, Var)] {
        &self.layers[g.index()]
    }
}

/// Slices a flat group node into per-layer weight and bias nodes.
pub fn slice_layers(t: &mut Tape, flat: Var, shapes: &[(usize, usize)]) -> Vec<(Var, Var)> {
    let mut off = 0;
    shapes
        .iter()
        .map(|&(i, o)| {
            let w = t.slice(flat, off, i, o);
            let b = t.slice(flat, off + i * o, 1, o);
            off += i * o + o;
            (w, b)
        })
        .collect()
}

/// Per-point MLP, max-pool over points, final affine.
pub fn point_features_on(t: &mut Tape, layers: &[(Var, Var)], cloud: &PointCloud) -> Var {
    let x = t.constant(cloud.flat(), cloud.len(), 3);
    let (last, hidden) = layers.split_last().expect("point encoder has layers");
    let mut h = x;
    for &(w, b) in hidden {
        let a = t.affine(h, w, b);
        h = t.softplus(a);
    }
    let pooled = t.max_pool_rows(h);
    t.affine(pooled, last.0, last.1)
}

/// Flatten, then two affine + ramp layers.
pub fn image_features_on(t: &mut Tape, layers: &[(Var, Var)], img: &ViewImage) -> Var {
    let mut h = t.constant(img.grid().to_vec(), 1, img.grid().len());
    for &(w, b) in layers {
        let a = t.affine(h, w, b);
        h = t.softplus(a);
    }
    h
}

/// Two-layer head to a tangent vector at the origin, `exp_0`, projection.
pub fn lift_on(t: &mut Tape, layers: &[(Var, Var)], feat: Var, c: f64) -> Var {
    let (w1, b1) = layers[0];
    let (w2, b2) = layers[1];
    let a = t.affine(feat, w1, b1);
    let h = t.softplus(a);
    let v = t.affine(h, w2, b2);
    let dim = t.shape(v).1;
    let origin = t.constant_vec(vec![0.0; dim]);
    let z = t.exp_map(origin, v, c);
    t.project(z, c)
}

fn check_image(params: &EncoderParams, img: &ViewImage) -> Result<()> {
    let side = params.widths().image_side;
    if img.height() != side || img.width() != side {
        return Err(EncodeError::Shape {
            what: "view image pixels",
            expected: side * side,
            got: img.height() * img.width(),
        });
    }
    Ok(())
}

fn record_group(t: &mut Tape, params: &EncoderParams, g: Group) -> Vec<(Var, Var)> {
    let flat = t.constant_vec(params.group(g).to_vec());
    slice_layers(t, flat, &params.widths().layers(g))
}

/// Euclidean point-cloud feature.
pub fn encode_points(params: &EncoderParams, cloud: &PointCloud) -> Result<Vec<f64>> {
    let mut t = Tape::new();
    let layers = record_group(&mut t, params, Group::PointEncoder);
    let f = point_features_on(&mut t, &layers, cloud);
    Ok(t.value(f).to_vec())
}

/// Euclidean view feature.
pub fn encode_image(params: &EncoderParams, img: &ViewImage) -> Result<Vec<f64>> {
    check_image(params, img)?;
    let mut t = Tape::new();
    let layers = record_group(&mut t, params, Group::ImageEncoder);
    let f = image_features_on(&mut t, &layers, img);
    Ok(t.value(f).to_vec())
}

/// Maps a feature through the branch's head onto the ball.
pub fn project_and_lift(params: &EncoderParams, branch: Branch, feat: &[f64], c: Curvature) -> Result<BallPoint> {
    let expected = params.widths().feature;
    if feat.len() != expected {
        return Err(EncodeError::Shape {
            what: "feature width",
            expected,
            got: feat.len(),
        });
    }
    let mut t = Tape::new();
    let layers = record_group(&mut t, params, branch.head());
    let x = t.constant_vec(feat.to_vec());
    let z = lift_on(&mut t, &layers, x, c.get());
    Ok(project_to_ball(t.value(z), c))
}

/// Tangent vector produced by the branch's head, before the lift.
pub fn head_tangent(params: &EncoderParams, branch: Branch, feat: &[f64]) -> Result<Vec<f64>> {
    let expected = params.widths().feature;
    if feat.len() != expected {
        return Err(EncodeError::Shape {
            what: "feature width",
            expected,
            got: feat.len(),
        });
    }
    let mut t = Tape::new();
    let layers = record_group(&mut t, params, branch.head());
    let x = t.constant_vec(feat.to_vec());
    let a = t.affine(x, layers[0].0, layers[0].1);
    let h = t.softplus(a);
    let v = t.affine(h, layers[1].0, layers[1].1);
    Ok(t.value(v).to_vec())
}
