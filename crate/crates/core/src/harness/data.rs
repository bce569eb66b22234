//! Synthetic two-modality tracking episodes.
//!
//! Modality R shows the target as a flat rectangle among flat clutter boxes;
//! modality X shows it as a smooth warm blob on a quiet background. A
//! degradation tag may suppress the target in one modality or add heavy
//! noise to both.

use std::fmt;
use std::str::FromStr;

use super::config::Dims;
use crate::error::{Error, Result};
use crate::losses::BBox;
use crate::numerics::{Checkpoint, RngStream, Tensor};

const BASE_NOISE: f64 = 0.05;
const HEAVY_NOISE: f64 = 0.25;
const RESIDUAL: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Degradation {
    None,
    RgbDegraded,
    XDegraded,
    BothNoisy,
}

impl Degradation {
    pub const ALL: [Degradation; 4] = [
        Degradation::None,
        Degradation::RgbDegraded,
        Degradation::XDegraded,
        Degradation::BothNoisy,
    ];
    /// Tags where exactly one modality still carries the target.
    pub const COMPLEMENTARY: [Degradation; 2] = [Degradation::RgbDegraded, Degradation::XDegraded];

    pub fn code(self) -> u8 {
        match self {
            Degradation::None => 0,
            Degradation::RgbDegraded => 1,
            Degradation::XDegraded => 2,
            Degradation::BothNoisy => 3,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.code() == code)
            .ok_or_else(|| Error::Format(format!("unknown degradation code {code}")))
    }
}

impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Degradation::None => "none",
            Degradation::RgbDegraded => "rgb_degraded",
            Degradation::XDegraded => "x_degraded",
            Degradation::BothNoisy => "both_noisy",
        })
    }
}

impl FromStr for Degradation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.to_string() == s)
            .ok_or_else(|| Error::Config(format!("unknown degradation `{s}`")))
    }
}

/// Frames are `[C, H, W]`; the box is normalized to the search frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub template_r: Tensor,
    pub template_x: Tensor,
    pub search_r: Tensor,
    pub search_x: Tensor,
    pub gt: BBox,
    pub degradation: Degradation,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

struct Appearance {
    r_level: [f64; 3],
    x_level: f64,
}

/// Pixel-space box `[x0, y0, x1, y1)` plus its continuous form.
#[derive(Clone, Copy)]
struct PixBox {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

impl PixBox {
    fn overlaps(&self, o: &PixBox, margin: f64) -> bool {
        self.x0 - margin < o.x1 && o.x0 - margin < self.x1 && self.y0 - margin < o.y1 && o.y0 - margin < self.y1
    }

    fn covers(&self, px: usize, py: usize) -> bool {
        let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

struct Canvas {
    c: usize,
    size: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn new(c: usize, size: usize, level: f64) -> Self {
        Self {
            c,
            size,
            data: vec![level; c * size * size],
        }
    }

    fn rect(&mut self, b: &PixBox, level: &[f64; 3], gain: f64) {
        for ch in 0..self.c {
            for y in 0..self.size {
                for x in 0..self.size {
                    if b.covers(x, y) {
                        self.data[(ch * self.size + y) * self.size + x] += gain * level[ch % 3];
                    }
                }
            }
        }
    }

    fn blob(&mut self, b: &PixBox, level: f64, gain: f64) {
        let (cx, cy) = ((b.x0 + b.x1) / 2.0, (b.y0 + b.y1) / 2.0);
        let (sx, sy) = ((b.x1 - b.x0) / 2.5, (b.y1 - b.y0) / 2.5);
        for ch in 0..self.c {
            for y in 0..self.size {
                for x in 0..self.size {
                    let dx = (x as f64 + 0.5 - cx) / sx;
                    let dy = (y as f64 + 0.5 - cy) / sy;
                    self.data[(ch * self.size + y) * self.size + x] +=
                        gain * level * (-(dx * dx + dy * dy) / 2.0).exp();
                }
            }
        }
    }

    fn noise(&mut self, rng: &mut RngStream, std: f64) {
        self.data.iter_mut().for_each(|v| *v += std * rng.normal());
    }

    fn finish(self) -> Tensor {
        Tensor::new([self.c, self.size, self.size], self.data).expect("canvas shape")
    }
}

fn appearance(rng: &mut RngStream) -> Appearance {
    Appearance {
        r_level: [rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0)],
        x_level: rng.uniform(0.6, 1.0),
    }
}

/// Renders one episode with the given tag.
pub fn render_sample(dims: &Dims, degradation: Degradation, rng: &mut RngStream) -> Sample {
    let (c, s, st) = (dims.channels, dims.search_size as f64, dims.template_size);
    let app = appearance(rng);
    let w = rng.uniform(0.18, 0.32);
    let h = rng.uniform(0.18, 0.32);
    let cx = rng.uniform(0.05 + w / 2.0, 0.95 - w / 2.0);
    let cy = rng.uniform(0.05 + h / 2.0, 0.95 - h / 2.0);
    let gt = BBox::new(cx, cy, w, h);
    let [x1, y1, x2, y2] = gt.corners();
    let target = PixBox {
        x0: x1 * s,
        y0: y1 * s,
        x1: x2 * s,
        y1: y2 * s,
    };

    let (r_gain, x_gain, noise) = match degradation {
        Degradation::None => (1.0, 1.0, BASE_NOISE),
        Degradation::RgbDegraded => (RESIDUAL, 1.0, BASE_NOISE),
        Degradation::XDegraded => (1.0, RESIDUAL, BASE_NOISE),
        Degradation::BothNoisy => (1.0, 1.0, HEAVY_NOISE),
    };

    let mut search_r = Canvas::new(c, dims.search_size, 0.0);
    let mut search_x = Canvas::new(c, dims.search_size, 0.0);
    search_r.rect(&target, &app.r_level, r_gain);
    search_x.blob(&target, app.x_level, x_gain);

    // Clutter in R never touches the target box and is invisible in X.
    let mut placed = 0;
    for _ in 0..32 {
        if placed == 2 {
            break;
        }
        let (cw, ch) = (rng.uniform(0.12, 0.3) * s, rng.uniform(0.12, 0.3) * s);
        let (ox, oy) = (rng.uniform(0.0, s - cw), rng.uniform(0.0, s - ch));
        let clutter = PixBox {
            x0: ox,
            y0: oy,
            x1: ox + cw,
            y1: oy + ch,
        };
        if clutter.overlaps(&target, 1.0) {
            continue;
        }
        let level = [rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0), rng.uniform(0.3, 1.0)];
        search_r.rect(&clutter, &level, 1.0);
        placed += 1;
    }
    search_r.noise(rng, noise);
    search_x.noise(rng, noise);

    // Templates are clean crops centred on the target at the same pixel scale.
    let half_w = (w * s).min(st as f64 - 2.0) / 2.0;
    let half_h = (h * s).min(st as f64 - 2.0) / 2.0;
    let mid = st as f64 / 2.0;
    let tbox = PixBox {
        x0: mid - half_w,
        y0: mid - half_h,
        x1: mid + half_w,
        y1: mid + half_h,
    };
    let mut template_r = Canvas::new(c, st, 0.0);
    let mut template_x = Canvas::new(c, st, 0.0);
    template_r.rect(&tbox, &app.r_level, 1.0);
    template_x.blob(&tbox, app.x_level, 1.0);
    template_r.noise(rng, BASE_NOISE);
    template_x.noise(rng, BASE_NOISE);

    Sample {
        template_r: template_r.finish(),
        template_x: template_x.finish(),
        search_r: search_r.finish(),
        search_x: search_x.finish(),
        gt,
        degradation,
    }
}

/// Sum over channels and box pixels of the squared deviation from the mean
/// value outside the box.
pub fn box_energy(frame: &Tensor, gt: &BBox) -> f64 {
    let (c, s) = (frame.shape()[0], frame.shape()[2]);
    let sf = s as f64;
    let [x1, y1, x2, y2] = gt.corners();
    let b = PixBox {
        x0: x1 * sf,
        y0: y1 * sf,
        x1: x2 * sf,
        y1: y2 * sf,
    };
    let d = frame.data();
    let (mut bg, mut n_bg) = (0.0, 0usize);
    for ch in 0..c {
        for y in 0..s {
            for x in 0..s {
                if !b.covers(x, y) {
                    bg += d[(ch * s + y) * s + x];
                    n_bg += 1;
                }
            }
        }
    }
    let bg = if n_bg > 0 { bg / n_bg as f64 } else { 0.0 };
    let mut e = 0.0;
    for ch in 0..c {
        for y in 0..s {
            for x in 0..s {
                if b.covers(x, y) {
                    let v = d[(ch * s + y) * s + x] - bg;
                    e += v * v;
                }
            }
        }
    }
    e
}

impl Dataset {
    /// `count` episodes whose tags cycle through `tags`.
    pub fn generate(dims: &Dims, count: usize, tags: &[Degradation], rng: &mut RngStream) -> Result<Self> {
        if tags.is_empty() {
            return Err(Error::Config("at least one degradation tag is required".into()));
        }
        let samples = (0..count)
            .map(|i| render_sample(dims, tags[i % tags.len()], rng))
            .collect();
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut entries = Vec::with_capacity(self.samples.len() * 6);
        for (i, s) in self.samples.iter().enumerate() {
            entries.push((format!("sample{i}.template_r"), s.template_r.clone()));
            entries.push((format!("sample{i}.template_x"), s.template_x.clone()));
            entries.push((format!("sample{i}.search_r"), s.search_r.clone()));
            entries.push((format!("sample{i}.search_x"), s.search_x.clone()));
            entries.push((format!("sample{i}.gt"), Tensor::new([4], s.gt.to_array().to_vec())?));
            entries.push((
                format!("sample{i}.degradation"),
                Tensor::scalar(f64::from(s.degradation.code())),
            ));
        }
        Ok(Checkpoint { entries })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if !ck.entries.len().is_multiple_of(6) {
            return Err(Error::Format("dataset entries must come in groups of six".into()));
        }
        let mut samples = Vec::with_capacity(ck.entries.len() / 6);
        for (i, group) in ck.entries.chunks(6).enumerate() {
            let expect = ["template_r", "template_x", "search_r", "search_x", "gt", "degradation"];
            for ((name, _), field) in group.iter().zip(expect) {
                if *name != format!("sample{i}.{field}") {
                    return Err(Error::Format(format!("unexpected entry `{name}`")));
                }
            }
            samples.push(Sample {
                template_r: group[0].1.clone(),
                template_x: group[1].1.clone(),
                search_r: group[2].1.clone(),
                search_x: group[3].1.clone(),
                gt: BBox::from_slice(group[4].1.data())?,
                degradation: Degradation::from_code(group[5].1.item() as u8)?,
            });
        }
        Ok(Self { samples })
    }
}

/// Splits a `[C, S, S]` frame into row-major `[(S/p)², C·p·p]` patch rows.
pub fn patchify(frame: &Tensor, patch: usize) -> Result<Tensor> {
    let shape = frame.shape();
    if shape.len() != 3 || shape[1] != shape[2] || !shape[1].is_multiple_of(patch) {
        return Err(Error::contract(format!(
            "cannot split frame {shape:?} into {patch}x{patch} patches"
        )));
    }
    let (c, s) = (shape[0], shape[1]);
    let grid = s / patch;
    let width = c * patch * patch;
    let src = frame.data();
    let mut out = Vec::with_capacity(grid * grid * width);
    for gy in 0..grid {
        for gx in 0..grid {
            for ch in 0..c {
                for py in 0..patch {
                    let row = (ch * s + gy * patch + py) * s + gx * patch;
                    out.extend_from_slice(&src[row..row + patch]);
                }
            }
        }
    }
    Tensor::new([grid * grid, width], out)
}
