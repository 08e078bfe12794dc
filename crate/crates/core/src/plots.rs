//! PNG figure panels with JSON manifests holding the plotted arrays.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::data::random_field::wavenumber;
use crate::data::{Field, OperatorDataset};
use crate::error::{MofsError, Result};
use crate::eval::FewShotSplit;
use crate::fno::FnoEncoder;
use crate::fusion::VisionSource;
use crate::model::MofsModel;
use crate::nn::Grid;
use crate::params::ParamStore;
use crate::pretrain::Pretrainer;
use crate::spectral::magnitude_spectrum;
use crate::tensor::Tensor;
use crate::text::{sample_descriptions, HashEncoder, DEFAULT_MAX_TOKENS};

pub const TILE_PX: u32 = 8;
pub const GAP_PX: u32 = 4;
/// Latent channels shown in the channel grid.
pub const MAX_CHANNELS: usize = 8;

pub const FIG1_TILES: [&str; 10] = [
    "ground truth a",
    "mask a",
    "visible a",
    "predicted a",
    "ground truth u",
    "mask u",
    "visible u",
    "predicted u",
    "ground truth |FFT a|",
    "predicted |FFT a|",
];

const VIRIDIS: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

const SERIES_COLORS: [[u8; 3]; 4] = [[31, 119, 180], [255, 127, 14], [44, 160, 44], [214, 39, 40]];

/// Maps `t ∈ [0,1]` through a piecewise-linear viridis approximation.
pub fn colormap(t: f64) -> Rgb<u8> {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (VIRIDIS.len() - 1) as f64;
    let i = (x.floor() as usize).min(VIRIDIS.len() - 2);
    let f = x - i as f64;
    let c = |k: usize| (VIRIDIS[i][k] + f * (VIRIDIS[i + 1][k] - VIRIDIS[i][k])).round() as u8;
    Rgb([c(0), c(1), c(2)])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tile {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl Tile {
    pub fn new(name: impl Into<String>, f: &Field) -> Self {
        Self { name: name.into(), height: f.height(), width: f.width(), values: f.values().to_vec() }
    }

    fn range(&self) -> (f64, f64) {
        let lo = self.values.iter().copied().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() {
            (lo, hi)
        } else {
            (0.0, 0.0)
        }
    }
}

/// Tiles laid out row-major in `cols` columns, each with its own colour range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Panel {
    pub name: String,
    pub cols: usize,
    pub tiles: Vec<Tile>,
}

impl Panel {
    pub fn render(&self) -> RgbImage {
        let cols = self.cols.max(1);
        let rows = self.tiles.len().div_ceil(cols);
        let tw = self.tiles.iter().map(|t| t.width).max().unwrap_or(1) as u32 * TILE_PX;
        let th = self.tiles.iter().map(|t| t.height).max().unwrap_or(1) as u32 * TILE_PX;
        let w = cols as u32 * (tw + GAP_PX) + GAP_PX;
        let h = rows as u32 * (th + GAP_PX) + GAP_PX;
        let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
        for (k, tile) in self.tiles.iter().enumerate() {
            let (x0, y0) = (GAP_PX + (k % cols) as u32 * (tw + GAP_PX), GAP_PX + (k / cols) as u32 * (th + GAP_PX));
            let (lo, hi) = tile.range();
            let span = if hi > lo { hi - lo } else { 1.0 };
            for i in 0..tile.height {
                for j in 0..tile.width {
                    let px = colormap((tile.values[i * tile.width + j] - lo) / span);
                    for dy in 0..TILE_PX {
                        for dx in 0..TILE_PX {
                            img.put_pixel(x0 + j as u32 * TILE_PX + dx, y0 + i as u32 * TILE_PX + dy, px);
                        }
                    }
                }
            }
        }
        img
    }

    /// Writes `<name>.png` and `<name>.json`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let png = dir.join(format!("{}.png", self.name));
        self.render().save(&png).map_err(|e| MofsError::Image(e.to_string()))?;
        std::fs::write(dir.join(format!("{}.json", self.name)), serde_json::to_string_pretty(self)?)?;
        Ok(png)
    }

    pub fn tile(&self, name: &str) -> Option<&Tile> {
        self.tiles.iter().find(|t| t.name == name)
    }
}

/// Line chart on a log10 axis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinePlot {
    pub name: String,
    pub x_label: String,
    pub series: BTreeMap<String, Vec<f64>>,
}

impl LinePlot {
    pub fn render(&self, w: u32, h: u32) -> RgbImage {
        let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
        let (ml, mb, mt, mr) = (40i64, 30i64, 10i64, 10i64);
        let (pw, ph) = (w as i64 - ml - mr, h as i64 - mt - mb);
        let axis = Rgb([0, 0, 0]);
        draw_line(&mut img, (ml, mt), (ml, mt + ph), axis);
        draw_line(&mut img, (ml, mt + ph), (ml + pw, mt + ph), axis);
        let logs: Vec<Vec<f64>> =
            self.series.values().map(|s| s.iter().map(|v| v.max(1e-300).log10()).collect()).collect();
        let all = logs.iter().flatten().copied().filter(|v| v.is_finite());
        let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let span = if hi > lo { hi - lo } else { 1.0 };
        let n = logs.iter().map(Vec::len).max().unwrap_or(1).max(2);
        for (k, s) in logs.iter().enumerate() {
            let c = SERIES_COLORS[k % SERIES_COLORS.len()];
            let pt = |i: usize, v: f64| {
                (ml + (i as f64 / (n - 1) as f64 * pw as f64) as i64, mt + ph - ((v - lo) / span * ph as f64) as i64)
            };
            for i in 1..s.len() {
                draw_line(&mut img, pt(i - 1, s[i - 1]), pt(i, s[i]), Rgb(c));
            }
            for dy in 0..6 {
                draw_line(&mut img, (ml + pw - 30, mt + 4 + 8 * k as i64 + dy / 3), (ml + pw - 10, mt + 4 + 8 * k as i64 + dy / 3), Rgb(c));
            }
        }
        img
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let png = dir.join(format!("{}.png", self.name));
        self.render(480, 320).save(&png).map_err(|e| MofsError::Image(e.to_string()))?;
        std::fs::write(dir.join(format!("{}.json", self.name)), serde_json::to_string_pretty(self)?)?;
        Ok(png)
    }
}

fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Centred spectrum magnitude, `log(1 + |F|)`.
pub fn shifted_log_spectrum(f: &Field) -> Field {
    let (h, w) = f.dims();
    let m = magnitude_spectrum(f);
    Field::from_fn(h, w, |i, j| (1.0 + m[((i + h / 2) % h) * w + (j + w / 2) % w]).ln()).expect("same dims")
}

/// Sobel gradient magnitude with zero padding.
pub fn sobel(f: &Field) -> Field {
    let (h, w) = f.dims();
    let at = |i: isize, j: isize| {
        if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
            0.0
        } else {
            f.at(i as usize, j as usize)
        }
    };
    Field::from_fn(h, w, |i, j| {
        let (i, j) = (i as isize, j as isize);
        let gx = at(i - 1, j + 1) + 2.0 * at(i, j + 1) + at(i + 1, j + 1) - at(i - 1, j - 1) - 2.0 * at(i, j - 1) - at(i + 1, j - 1);
        let gy = at(i + 1, j - 1) + 2.0 * at(i + 1, j) + at(i + 1, j + 1) - at(i - 1, j - 1) - 2.0 * at(i - 1, j) - at(i - 1, j + 1);
        (gx * gx + gy * gy).sqrt()
    })
    .expect("same dims")
}

/// Power averaged over channels and integer radial wavenumber shells.
pub fn radial_spectrum(latent: &Tensor, grid: Grid) -> Vec<f64> {
    let kmax = (grid.h.min(grid.w) / 2).max(1);
    let mut acc = vec![0.0; kmax + 1];
    let mut count = vec![0usize; kmax + 1];
    for c in 0..latent.cols() {
        let col: Vec<f64> = (0..latent.rows()).map(|r| latent.get(r, c)).collect();
        let m = magnitude_spectrum(&Field::new(grid.h, grid.w, col).expect("latent matches grid"));
        for i in 0..grid.h {
            for j in 0..grid.w {
                let r = wavenumber(i, grid.h).hypot(wavenumber(j, grid.w)).round() as usize;
                if r <= kmax {
                    acc[r] += m[i * grid.w + j].powi(2);
                    count[r] += 1;
                }
            }
        }
    }
    acc.iter().zip(&count).map(|(a, &n)| if n > 0 { a / n as f64 } else { 0.0 }).collect()
}

fn latent_of(encoder: &FnoEncoder, store: &ParamStore, grid: Grid, a: &Field) -> Result<Tensor> {
    let mut g = Graph::with_params(store);
    let x = g.constant(a.to_tensor());
    let y = encoder.forward(&mut g, x, grid)?;
    Ok(g.value(y).clone())
}

pub fn reconstruction_panel(p: &Pretrainer, ds: &OperatorDataset, index: usize, seed: u64) -> Result<Panel> {
    let r = p.reconstruct(ds, index, seed)?;
    let (h, w) = r.a.dims();
    let mask = |m: &Tensor| Field::new(h, w, m.data().to_vec());
    let visible = |f: &Field, m: &Tensor| Field::new(h, w, f.values().iter().zip(m.data()).map(|(x, k)| x * k).collect());
    let fields = [
        r.a.clone(),
        mask(&r.masks.m_a)?,
        visible(&r.a, &r.masks.m_a)?,
        r.a_hat.clone(),
        r.u.clone(),
        mask(&r.masks.m_u)?,
        visible(&r.u, &r.masks.m_u)?,
        r.u_hat.clone(),
        r.f_true.clone(),
        r.f_hat.clone(),
    ];
    let tiles = FIG1_TILES.iter().zip(&fields).map(|(n, f)| Tile::new(*n, f)).collect();
    Ok(Panel { name: "fig1_reconstruction".into(), cols: 4, tiles })
}

/// Latent channels with their spectra and edge maps, one row each.
pub fn latent_panel(encoder: &FnoEncoder, store: &ParamStore, grid: Grid, a: &Field) -> Result<Panel> {
    let z = latent_of(encoder, store, grid, a)?;
    let c = z.cols().min(MAX_CHANNELS);
    let chans: Vec<Field> =
        (0..c).map(|k| Field::new(grid.h, grid.w, (0..z.rows()).map(|r| z.get(r, k)).collect())).collect::<Result<_>>()?;
    let mut tiles: Vec<Tile> = chans.iter().enumerate().map(|(k, f)| Tile::new(format!("channel {k}"), f)).collect();
    tiles.extend(chans.iter().enumerate().map(|(k, f)| Tile::new(format!("channel {k} |FFT|"), &shifted_log_spectrum(f))));
    tiles.extend(chans.iter().enumerate().map(|(k, f)| Tile::new(format!("channel {k} edges"), &sobel(f))));
    Ok(Panel { name: "fig2_latent_channels".into(), cols: c, tiles })
}

/// Few-shot prediction of one query with a model checkpoint.
fn predict_with(ck: &Checkpoint, test: &OperatorDataset, split: &FewShotSplit, query: usize) -> Result<Field> {
    let mut m = MofsModel::from_checkpoint(ck, &VisionSource::default())?;
    let norm = split.normalizers(test)?;
    let demos: Vec<_> = split.demo_samples(test).into_iter().cloned().collect();
    if !m.contexts.contains_key(&test.operator_id) {
        let text = HashEncoder { d_bert: m.cfg.d_bert, max_tokens: DEFAULT_MAX_TOKENS };
        m.add_unseen_context(test.operator_id, &test.name, &sample_descriptions(&test.name, &demos), &text)?;
    }
    let prompts: Vec<_> = demos.iter().map(|s| norm.encode(s)).collect();
    m.predict_field(&prompts, &norm.a.encode(&test.samples[query].a), test.operator_id, &norm.u)
}

pub fn abs_diff(a: &Field, b: &Field) -> Field {
    Field::new(a.height(), a.width(), a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).collect())
        .expect("same dims")
}

pub fn stage_comparison_panel(
    stage1: &Checkpoint,
    stage2: &Checkpoint,
    test: &OperatorDataset,
    j: usize,
    seed: u64,
) -> Result<Panel> {
    let split = FewShotSplit::draw(test.len(), j, seed, test.operator_id)?;
    let q = split.queries[0];
    let truth = &test.samples[q].u;
    let p1 = predict_with(stage1, test, &split, q)?;
    let p2 = predict_with(stage2, test, &split, q)?;
    let diff = Field::new(truth.height(), truth.width(), p2.values().iter().zip(p1.values()).map(|(b, a)| b - a).collect())?;
    let tiles = vec![
        Tile::new("input a", &test.samples[q].a),
        Tile::new("ground truth u", truth),
        Tile::new("stage 1 prediction", &p1),
        Tile::new("stage 2 prediction", &p2),
        Tile::new("stage 1 error", &abs_diff(&p1, truth)),
        Tile::new("stage 2 error", &abs_diff(&p2, truth)),
        Tile::new("stage 2 - stage 1", &diff),
    ];
    Ok(Panel { name: "fig3_stage_comparison".into(), cols: 4, tiles })
}

/// Inputs for [`emit_plots`]; absent checkpoints skip the panels that need them.
pub struct PlotInputs<'a> {
    pub pretrain: Option<&'a Checkpoint>,
    pub stage1: Option<&'a Checkpoint>,
    pub stage2: Option<&'a Checkpoint>,
    pub dataset: &'a OperatorDataset,
    pub test: Option<&'a OperatorDataset>,
    pub index: usize,
    pub seed: u64,
    pub j: usize,
}

/// Emits every panel whose inputs are present, warning for the rest.
pub fn emit_plots(inp: &PlotInputs<'_>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let ds = inp.dataset;
    if inp.index >= ds.len() {
        return Err(MofsError::Config(format!("{} has no sample {}", ds.name, inp.index)));
    }
    let grid = Grid::new(ds.dims().0, ds.dims().1);
    let a = ds.normalizers.a.encode(&ds.samples[inp.index].a);
    let mut out = Vec::new();
    let pre = inp.pretrain.map(Pretrainer::from_checkpoint).transpose()?;
    let models: Vec<(&str, MofsModel)> = [("stage 1", inp.stage1), ("stage 2", inp.stage2)]
        .into_iter()
        .filter_map(|(n, ck)| ck.map(|c| MofsModel::from_checkpoint(c, &VisionSource::default()).map(|m| (n, m))))
        .collect::<Result<_>>()?;
    match &pre {
        Some(p) => out.push(reconstruction_panel(p, ds, inp.index, inp.seed)?.save(out_dir)?),
        None => warn!("no pretraining checkpoint; skipping the reconstruction panel"),
    }
    let encoder = pre.as_ref().map(|p| (&p.encoder, &p.store)).or(models.last().map(|(_, m)| (&m.encoder, &m.store)));
    match encoder {
        Some((e, s)) => out.push(latent_panel(e, s, grid, &a)?.save(out_dir)?),
        None => warn!("no checkpoint with an encoder; skipping the latent channel panel"),
    }
    match (inp.stage1, inp.stage2) {
        (Some(s1), Some(s2)) => {
            let test = inp.test.unwrap_or(ds);
            out.push(stage_comparison_panel(s1, s2, test, inp.j, inp.seed)?.save(out_dir)?);
        }
        _ => warn!("stage 1 and stage 2 checkpoints are both needed for the comparison panel"),
    }
    let mut series = BTreeMap::new();
    if let Some(p) = &pre {
        series.insert("pretrained".to_string(), radial_spectrum(&latent_of(&p.encoder, &p.store, grid, &a)?, grid));
    }
    for (n, m) in &models {
        series.insert(n.to_string(), radial_spectrum(&latent_of(&m.encoder, &m.store, grid, &a)?, grid));
    }
    if series.is_empty() {
        warn!("no checkpoints; skipping the latent spectrum panel");
    } else {
        let plot = LinePlot { name: "fig4_latent_spectrum".into(), x_label: "radial wavenumber".into(), series };
        out.push(plot.save(out_dir)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_endpoints_and_clamping() {
        assert_eq!(colormap(0.0), Rgb([68, 1, 84]));
        assert_eq!(colormap(1.0), Rgb([253, 231, 37]));
        assert_eq!(colormap(2.0), colormap(1.0));
        assert_eq!(colormap(f64::NAN), colormap(0.0));
    }

    #[test]
    fn sobel_of_a_ramp_is_constant_inside() {
        let f = Field::from_fn(6, 6, |_, j| j as f64).unwrap();
        let s = sobel(&f);
        for i in 1..5 {
            for j in 1..5 {
                assert!((s.at(i, j) - 8.0).abs() < 1e-12);
            }
        }
        assert_eq!(sobel(&Field::filled(5, 5, 0.0)), Field::filled(5, 5, 0.0));
    }

    #[test]
    fn constant_latent_has_all_power_at_zero() {
        let grid = Grid::new(8, 8);
        let z = Tensor::full(64, 2, 1.5);
        let s = radial_spectrum(&z, grid);
        assert!((s[0] - (64.0 * 1.5f64).powi(2)).abs() < 1e-9);
        assert!(s[1..].iter().all(|v| v.abs() < 1e-18));
    }

    #[test]
    fn panel_render_size_and_tile_placement() {
        let f = Field::from_fn(4, 4, |i, j| (i * 4 + j) as f64).unwrap();
        let p = Panel { name: "t".into(), cols: 2, tiles: (0..3).map(|k| Tile::new(format!("{k}"), &f)).collect() };
        let img = p.render();
        let side = 4 * TILE_PX;
        assert_eq!(img.dimensions(), (2 * (side + GAP_PX) + GAP_PX, 2 * (side + GAP_PX) + GAP_PX));
        assert_eq!(*img.get_pixel(GAP_PX, GAP_PX), colormap(0.0));
        assert_eq!(*img.get_pixel(GAP_PX + side - 1, GAP_PX + side - 1), colormap(1.0));
        assert_eq!(*img.get_pixel(img.width() - 2, img.height() - 2), Rgb([255, 255, 255]));
    }
}
