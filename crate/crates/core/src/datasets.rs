//! Multi-factor synthetic image datasets and the `MCDS` file format.
//!
//! Two generators are provided: stick figures (upper-body x lower-body posture,
//! 20x20 grayscale) and colored shapes (shape x fill color, 16x16 RGB). Each
//! factor is an independent ground-truth labeling of the same images.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"MCDS";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageDims {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat offset of `(row, col, channel)` in HWC order.
    pub fn index(&self, row: usize, col: usize, channel: usize) -> usize {
        (row * self.width + col) * self.channels + channel
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labeling {
    pub name: String,
    pub num_clusters: usize,
    pub labels: Vec<usize>,
}

/// `N` flattened images plus `M` independent ground-truth labelings.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiClusteringDataset {
    images: Tensor,
    dims: ImageDims,
    labelings: Vec<Labeling>,
}

impl MultiClusteringDataset {
    pub fn new(images: Tensor, dims: ImageDims, labelings: Vec<Labeling>) -> Result<Self> {
        let (n, d) = images.dims2()?;
        if d != dims.len() {
            return Err(Error::dim(
                "dataset",
                &[n, d],
                &[dims.height, dims.width, dims.channels],
            ));
        }
        if labelings.is_empty() {
            return Err(Error::Contract("dataset needs at least one labeling".into()));
        }
        if let Some(p) = images.data().iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Contract(format!("pixel value {p} outside [0, 1]")));
        }
        for l in &labelings {
            if l.labels.len() != n {
                return Err(Error::dim("labeling", &[l.labels.len()], &[n]));
            }
            let mut seen = vec![false; l.num_clusters];
            for &y in &l.labels {
                match seen.get_mut(y) {
                    Some(s) => *s = true,
                    None => {
                        return Err(Error::Contract(format!(
                            "label {y} out of range for '{}' with {} clusters",
                            l.name, l.num_clusters
                        )))
                    }
                }
            }
            if seen.iter().any(|s| !s) {
                return Err(Error::Contract(format!(
                    "labeling '{}' does not use all {} clusters",
                    l.name, l.num_clusters
                )));
            }
        }
        Ok(Self {
            images,
            dims,
            labelings,
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn labelings(&self) -> &[Labeling] {
        &self.labelings
    }

    pub fn num_samples(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn num_clusterings(&self) -> usize {
        self.labelings.len()
    }

    pub fn clustering_names(&self) -> Vec<&str> {
        self.labelings.iter().map(|l| l.name.as_str()).collect()
    }

    /// Serializes to the `MCDS` little-endian layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.num_samples();
        let mut out = Vec::with_capacity(24 + n * self.dim() * 4 + n * 4 * self.labelings.len());
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            n as u32,
            self.dims.height as u32,
            self.dims.width as u32,
            self.dims.channels as u32,
            self.labelings.len() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labelings {
            out.extend_from_slice(&(l.name.len() as u32).to_le_bytes());
            out.extend_from_slice(l.name.as_bytes());
            out.extend_from_slice(&(l.num_clusters as u32).to_le_bytes());
        }
        for &p in self.images.data() {
            out.extend_from_slice(&(p as f32).to_le_bytes());
        }
        for l in &self.labelings {
            for &y in &l.labels {
                out.extend_from_slice(&(y as u32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Parse {
                offset: 0,
                msg: "bad magic, expected \"MCDS\"".into(),
            });
        }
        let version_at = r.pos;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Parse {
                offset: version_at,
                msg: format!("unsupported version {version}"),
            });
        }
        let header_at = r.pos;
        let n = r.u32()? as usize;
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let c = r.u32()? as usize;
        let m_at = r.pos;
        let m = r.u32()? as usize;
        if n == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::Parse {
                offset: header_at,
                msg: format!("degenerate header N={n} H={h} W={w} C={c}"),
            });
        }
        if m == 0 {
            return Err(Error::Parse {
                offset: m_at,
                msg: "header declares zero clusterings".into(),
            });
        }
        let mut heads = Vec::with_capacity(m);
        for _ in 0..m {
            let len = r.u32()? as usize;
            let name_at = r.pos;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Parse {
                    offset: name_at,
                    msg: format!("clustering name is not utf-8: {e}"),
                })?
                .to_owned();
            let t_at = r.pos;
            let t = r.u32()? as usize;
            if t == 0 {
                return Err(Error::Parse {
                    offset: t_at,
                    msg: format!("clustering '{name}' has zero clusters"),
                });
            }
            heads.push((name, t));
        }
        let dims = ImageDims::new(h, w, c);
        let count = n.checked_mul(dims.len()).ok_or_else(|| Error::Parse {
            offset: header_at,
            msg: "pixel count overflows".into(),
        })?;
        let mut pixels = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.pos;
            let p = f32::from_le_bytes(r.take(4)?.try_into().unwrap()) as f64;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Parse {
                    offset: at,
                    msg: format!("pixel value {p} outside [0, 1]"),
                });
            }
            pixels.push(p);
        }
        let mut labelings = Vec::with_capacity(m);
        for (name, t) in heads {
            let mut labels = Vec::with_capacity(n);
            for _ in 0..n {
                let at = r.pos;
                let y = r.u32()? as usize;
                if y >= t {
                    return Err(Error::Parse {
                        offset: at,
                        msg: format!("label {y} out of range for '{name}' with {t} clusters"),
                    });
                }
                labels.push(y);
            }
            labelings.push(Labeling {
                name,
                num_clusters: t,
                labels,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Parse {
                offset: r.pos,
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        let images = Tensor::new(&[n, dims.len()], pixels)?;
        Self::new(images, dims, labelings).map_err(|e| Error::Parse {
            offset: 0,
            msg: e.to_string(),
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Parse {
                offset: self.pos,
                msg: format!(
                    "truncated payload: wanted {len} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            }),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn save_dataset(ds: &MultiClusteringDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, ds.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<MultiClusteringDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    MultiClusteringDataset::from_bytes(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Stickfig,
    ColoredShapes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub factors: Vec<usize>,
    pub samples_per_cell: usize,
    /// Half-width of the additive uniform pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn stickfig(seed: u64) -> Self {
        Self {
            kind: GeneratorKind::Stickfig,
            factors: vec![3, 3],
            samples_per_cell: 100,
            noise: 0.05,
            seed,
        }
    }

    pub fn colored_shapes(shapes: usize, colors: usize, seed: u64) -> Self {
        Self {
            kind: GeneratorKind::ColoredShapes,
            factors: vec![shapes, colors],
            samples_per_cell: 72,
            noise: 0.05,
            seed,
        }
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn with_samples_per_cell(mut self, n: usize) -> Self {
        self.samples_per_cell = n;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.factors.iter().any(|&f| f < 2) {
            return Err(Error::config(format!(
                "factor cardinalities must be >= 2, got {:?}",
                self.factors
            )));
        }
        if !(0.0..=0.2).contains(&self.noise) {
            return Err(Error::config(format!("noise {} outside [0, 0.2]", self.noise)));
        }
        if self.samples_per_cell == 0 {
            return Err(Error::config("samples_per_cell must be positive"));
        }
        Ok(())
    }
}

pub fn generate(spec: &GeneratorSpec) -> Result<MultiClusteringDataset> {
    match spec.kind {
        GeneratorKind::Stickfig => generate_stickfig(spec),
        GeneratorKind::ColoredShapes => generate_colored_shapes(spec),
    }
}

/// Line from `(r0, c0)` to `(r1, c1)` rasterized by dense sampling.
fn draw_line(img: &mut [f64], dims: ImageDims, from: (f64, f64), to: (f64, f64)) {
    let steps = 4 * ((to.0 - from.0).abs().max((to.1 - from.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let r = (from.0 + t * (to.0 - from.0)).round();
        let c = (from.1 + t * (to.1 - from.1)).round();
        if r >= 0.0 && c >= 0.0 && (r as usize) < dims.height && (c as usize) < dims.width {
            img[dims.index(r as usize, c as usize, 0)] = 1.0;
        }
    }
}

pub const STICKFIG_UPPER: [&str; 3] = ["arms_up", "arms_level", "arms_down"];
pub const STICKFIG_LOWER: [&str; 3] = ["legs_together", "legs_apart", "legs_bent"];

/// Noise-free stick figure. Upper-body variation lives in rows 0..=7 and
/// lower-body variation in rows 13..=19.
pub fn stickfig_template(upper: usize, lower: usize) -> Vec<f64> {
    let dims = ImageDims::new(20, 20, 1);
    let mut img = vec![0.0; dims.len()];
    // head
    for &(r, c) in &[(0, 9), (0, 10), (0, 11), (1, 9), (1, 11), (2, 9), (2, 10), (2, 11)] {
        img[dims.index(r, c, 0)] = 1.0;
    }
    // torso, shoulders at row 3, hips at row 12
    draw_line(&mut img, dims, (3.0, 10.0), (12.0, 10.0));
    let shoulder = (3.0, 10.0);
    let (left, right) = match upper {
        0 => ((0.0, 4.0), (0.0, 16.0)),
        1 => ((3.0, 3.0), (3.0, 17.0)),
        _ => ((7.0, 5.0), (7.0, 15.0)),
    };
    draw_line(&mut img, dims, shoulder, left);
    draw_line(&mut img, dims, shoulder, right);
    let hip = (12.0, 10.0);
    match lower {
        0 => {
            draw_line(&mut img, dims, hip, (19.0, 9.0));
            draw_line(&mut img, dims, hip, (19.0, 11.0));
        }
        1 => {
            draw_line(&mut img, dims, hip, (19.0, 3.0));
            draw_line(&mut img, dims, hip, (19.0, 17.0));
        }
        _ => {
            draw_line(&mut img, dims, hip, (15.0, 5.0));
            draw_line(&mut img, dims, (15.0, 5.0), (19.0, 8.0));
            draw_line(&mut img, dims, hip, (15.0, 15.0));
            draw_line(&mut img, dims, (15.0, 15.0), (19.0, 12.0));
        }
    }
    img
}

fn add_noise(img: &mut [f64], noise: f64, rng: &mut ChaCha8Rng) {
    for p in img.iter_mut() {
        let v = if noise > 0.0 {
            *p + rng.gen_range(-noise..=noise)
        } else {
            *p
        };
        // stored as f32 on disk; keep values exactly representable
        *p = (v.clamp(0.0, 1.0) as f32) as f64;
    }
}

fn assemble(
    spec: &GeneratorSpec,
    dims: ImageDims,
    names: [&str; 2],
    render: impl Fn(usize, usize) -> Vec<f64>,
) -> Result<MultiClusteringDataset> {
    let (t0, t1) = (spec.factors[0], spec.factors[1]);
    let cells = t0 * t1;
    let n = cells * spec.samples_per_cell;
    let templates: Vec<Vec<f64>> = (0..cells).map(|c| render(c % t0, c / t0)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pixels = Vec::with_capacity(n * dims.len());
    let mut first = Vec::with_capacity(n);
    let mut second = Vec::with_capacity(n);
    for i in 0..n {
        let cell = i % cells;
        let mut img = templates[cell].clone();
        add_noise(&mut img, spec.noise, &mut rng);
        pixels.extend_from_slice(&img);
        first.push(cell % t0);
        second.push(cell / t0);
    }
    let images = Tensor::new(&[n, dims.len()], pixels)?;
    MultiClusteringDataset::new(
        images,
        dims,
        vec![
            Labeling {
                name: names[0].into(),
                num_clusters: t0,
                labels: first,
            },
            Labeling {
                name: names[1].into(),
                num_clusters: t1,
                labels: second,
            },
        ],
    )
}

pub fn generate_stickfig(spec: &GeneratorSpec) -> Result<MultiClusteringDataset> {
    if spec.kind != GeneratorKind::Stickfig {
        return Err(Error::config("generate_stickfig called with a non-stickfig spec"));
    }
    spec.validate()?;
    if spec.factors != [3, 3] {
        return Err(Error::config(format!(
            "stickfig supports factor cardinalities (3, 3), got {:?}",
            spec.factors
        )));
    }
    assemble(spec, ImageDims::new(20, 20, 1), ["upper", "lower"], stickfig_template)
}

pub const SHAPE_NAMES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const COLOR_NAMES: [&str; 4] = ["red", "yellow", "green", "blue"];
const PALETTE: [[f64; 3]; 4] = [[0.9, 0.25, 0.1], [0.9, 0.6, 0.1], [0.2, 0.8, 0.2], [0.2, 0.3, 0.9]];

/// Binary 16x16 mask of one of the four shapes, centred on the image.
pub fn shape_mask(shape: usize) -> Vec<bool> {
    let size = 16;
    let centre = 7.5;
    let mut mask = vec![false; size * size];
    for r in 0..size {
        for c in 0..size {
            let (y, x) = (r as f64 - centre, c as f64 - centre);
            mask[r * size + c] = match shape {
                0 => x * x + y * y <= 7.0 * 7.0,
                1 => x.abs() <= 4.5 && y.abs() <= 4.5,
                // apex up, base at the bottom
                2 => (-6.5..=6.5).contains(&y) && x.abs() <= (y + 6.5) * 0.55,
                _ => (x.abs() <= 1.5 && y.abs() <= 7.0) || (y.abs() <= 1.5 && x.abs() <= 7.0),
            };
        }
    }
    mask
}

pub fn colored_shape_template(shape: usize, color: usize) -> Vec<f64> {
    let dims = ImageDims::new(16, 16, 3);
    let mask = shape_mask(shape);
    let mut img = vec![0.0; dims.len()];
    for (p, &on) in mask.iter().enumerate() {
        if on {
            for ch in 0..3 {
                img[p * 3 + ch] = PALETTE[color][ch];
            }
        }
    }
    img
}

pub fn generate_colored_shapes(spec: &GeneratorSpec) -> Result<MultiClusteringDataset> {
    if spec.kind != GeneratorKind::ColoredShapes {
        return Err(Error::config("generate_colored_shapes called with a non-shapes spec"));
    }
    spec.validate()?;
    if spec.factors.len() != 2 || spec.factors.iter().any(|&f| f > 4) {
        return Err(Error::config(format!(
            "colored_shapes supports two factors with 2..=4 levels, got {:?}",
            spec.factors
        )));
    }
    assemble(
        spec,
        ImageDims::new(16, 16, 3),
        ["shape", "color"],
        colored_shape_template,
    )
}
