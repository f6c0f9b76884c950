//! Multi-scale MSE + spectral-angle training loss and the evaluation metrics
//! (MSE, SAM, PSNR, SSIM) with their report format.
//!
//! Spectral tensors use the layout `[..., C, H, W]`: spectral vectors run
//! along the channel axis and every leading axis (sample, date) is averaged.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ops::{self, spectral_layout, SUPPORTED_SCALES};
use crate::tensor::{Float, Tape, Tensor, Var};

pub const SAM_EPSILON: f64 = 1e-8;
pub const PSNR_CLAMP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub scales: Vec<f64>,
    pub w_mse: f64,
    pub w_sam: f64,
    pub sam_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { scales: vec![1.0, 0.5, 0.25], w_mse: 0.5, w_sam: 0.5, sam_epsilon: SAM_EPSILON }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::config("loss.scales must not be empty"));
        }
        if let Some(s) = self.scales.iter().find(|s| !SUPPORTED_SCALES.contains(s)) {
            return Err(Error::config(format!("unsupported loss scale {s}; expected a subset of {SUPPORTED_SCALES:?}")));
        }
        if !(self.w_mse >= 0.0 && self.w_sam >= 0.0) {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if !(self.sam_epsilon > 0.0) {
            return Err(Error::config("loss.sam_epsilon must be positive"));
        }
        Ok(())
    }
}

/// Records `(1/S)·Σ_s [w_mse·MSE_s + w_sam·SAM_s]` on the tape, resizing both
/// operands bilinearly at every scale.
pub fn multiscale_loss<F: Float>(tape: &mut Tape<F>, pred: Var, target: Var, config: &LossConfig) -> Result<Var> {
    config.validate()?;
    let mut total: Option<Var> = None;
    for &s in &config.scales {
        let p = tape.bilinear_resize(pred, s)?;
        let t = tape.bilinear_resize(target, s)?;
        let m = tape.mse(p, t)?;
        let a = tape.sam(p, t, F::lit(config.sam_epsilon))?;
        let m = tape.scale(m, F::lit(config.w_mse));
        let a = tape.scale(a, F::lit(config.w_sam));
        let level = tape.add(m, a)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, level)?,
            None => level,
        });
    }
    let total = total.expect("validated non-empty");
    Ok(tape.scale(total, F::lit(1.0 / config.scales.len() as f64)))
}

/// Value of [`multiscale_loss`] without recording gradients.
pub fn multiscale_loss_value<F: Float>(pred: &Tensor<F>, target: &Tensor<F>, config: &LossConfig) -> Result<F> {
    let mut tape = Tape::new();
    let (p, t) = (tape.constant(pred.clone()), tape.constant(target.clone()));
    let loss = multiscale_loss(&mut tape, p, t, config)?;
    Ok(tape.value(loss).item())
}

/// Mean squared error over every element.
pub fn mse_loss<F: Float>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<F> {
    ops::mse(pred, target)
}

/// Mean spectral angle in radians over every pixel of every leading index.
pub fn sam_loss<F: Float>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<F> {
    ops::sam(pred, target, F::lit(SAM_EPSILON))
}

/// `10·log10(1/mse)` for data on `[0, 1]`, clamped at 100 dB.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CLAMP_DB;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CLAMP_DB)
}

pub fn psnr<F: Float>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<f64> {
    Ok(psnr_from_mse(mse_f64(pred, target, None)?))
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// SSIM map of one `h × w` image pair over valid window positions,
/// `(h − 10) × (w − 10)` values, row-major.
pub fn ssim_map(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::config(format!("SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {h}×{w}")));
    }
    let g = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    // five moment images, filtered horizontally then vertically
    let fields: [Box<dyn Fn(usize) -> f64>; 5] = [
        Box::new(|i| x[i]),
        Box::new(|i| y[i]),
        Box::new(|i| x[i] * x[i]),
        Box::new(|i| y[i] * y[i]),
        Box::new(|i| x[i] * y[i]),
    ];
    let mut moments = Vec::with_capacity(5);
    for f in &fields {
        let mut horiz = vec![0.0; h * ow];
        for r in 0..h {
            for c in 0..ow {
                horiz[r * ow + c] = (0..SSIM_WINDOW).map(|k| g[k] * f(r * w + c + k)).sum();
            }
        }
        let mut full = vec![0.0; oh * ow];
        for r in 0..oh {
            for c in 0..ow {
                full[r * ow + c] = (0..SSIM_WINDOW).map(|k| g[k] * horiz[(r + k) * ow + c]).sum();
            }
        }
        moments.push(full);
    }
    let map = (0..oh * ow)
        .map(|i| {
            let (mx, my) = (moments[0][i], moments[1][i]);
            let vx = moments[2][i] - mx * mx;
            let vy = moments[3][i] - my * my;
            let cov = moments[4][i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .collect();
    Ok(map)
}

fn planes<'a, F: Float>(t: &'a Tensor<F>) -> Result<(usize, usize, impl Iterator<Item = Vec<f64>> + 'a)> {
    let r = t.rank();
    if r < 2 {
        return Err(Error::shape(format!("SSIM needs images, got {:?}", t.shape())));
    }
    let (h, w) = (t.shape()[r - 2], t.shape()[r - 1]);
    let it = t.data().chunks_exact(h * w).map(|p| p.iter().map(|v| v.to_f64_lossy()).collect());
    Ok((h, w, it))
}

/// Mean SSIM over window positions, then over every 2-D image in the stack.
pub fn ssim<F: Float>(pred: &Tensor<F>, target: &Tensor<F>) -> Result<f64> {
    ssim_impl(pred, target, None).map(|v| v.expect("unmasked SSIM always has windows"))
}

/// SSIM restricted to windows centred on pixels with `mask = 1`; `None` without any.
fn ssim_impl<F: Float>(pred: &Tensor<F>, target: &Tensor<F>, mask: Option<&Tensor<F>>) -> Result<Option<f64>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!("ssim: shapes {:?} and {:?} differ", pred.shape(), target.shape())));
    }
    let (h, w, pp) = planes(pred)?;
    let (_, _, tp) = planes(target)?;
    let (oh, ow) = (h.saturating_sub(SSIM_WINDOW - 1), w.saturating_sub(SSIM_WINDOW - 1));
    let half = SSIM_WINDOW / 2;
    let channels = if mask.is_some() { spectral_layout(pred.shape())?.1 } else { 1 };
    let (mut total, mut count) = (0.0, 0usize);
    for (idx, (p, t)) in pp.zip(tp).enumerate() {
        let map = ssim_map(&p, &t, h, w)?;
        match mask {
            None => {
                total += map.iter().sum::<f64>() / map.len() as f64;
                count += 1;
            }
            Some(m) => {
                // one mask plane per (lead) index, shared across channels
                let plane = &m.data()[(idx / channels) * h * w..(idx / channels + 1) * h * w];
                for r in 0..oh {
                    for c in 0..ow {
                        if plane[(r + half) * w + c + half] > F::zero() {
                            total += map[r * ow + c];
                            count += 1;
                        }
                    }
                }
            }
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

fn check_mask<F: Float>(pred: &Tensor<F>, mask: &Tensor<F>) -> Result<(usize, usize, usize)> {
    let (lead, c, plane) = spectral_layout(pred.shape())?;
    if mask.numel() != lead * plane {
        return Err(Error::shape(format!("mask {:?} does not match prediction {:?}", mask.shape(), pred.shape())));
    }
    Ok((lead, c, plane))
}

/// MSE in double precision, optionally restricted to pixels where `mask = 1`.
fn mse_f64<F: Float>(pred: &Tensor<F>, target: &Tensor<F>, mask: Option<&Tensor<F>>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!("mse: shapes {:?} and {:?} differ", pred.shape(), target.shape())));
    }
    let sq = |i: usize| {
        let d = pred.data()[i].to_f64_lossy() - target.data()[i].to_f64_lossy();
        d * d
    };
    let Some(mask) = mask else {
        return Ok((0..pred.numel()).map(sq).sum::<f64>() / pred.numel() as f64);
    };
    let (lead, c, plane) = check_mask(pred, mask)?;
    let (mut total, mut n) = (0.0, 0usize);
    for l in 0..lead {
        for px in 0..plane {
            if mask.data()[l * plane + px] > F::zero() {
                for ch in 0..c {
                    total += sq((l * c + ch) * plane + px);
                }
                n += c;
            }
        }
    }
    Ok(if n == 0 { f64::NAN } else { total / n as f64 })
}

fn sam_f64<F: Float>(pred: &Tensor<F>, target: &Tensor<F>, mask: Option<&Tensor<F>>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!("sam: shapes {:?} and {:?} differ", pred.shape(), target.shape())));
    }
    let (lead, c, plane) = match mask {
        Some(m) => check_mask(pred, m)?,
        None => spectral_layout(pred.shape())?,
    };
    let (mut total, mut n) = (0.0, 0usize);
    for l in 0..lead {
        for px in 0..plane {
            if let Some(m) = mask {
                if m.data()[l * plane + px] <= F::zero() {
                    continue;
                }
            }
            let (mut dot, mut nt, mut np) = (0.0, 0.0, 0.0);
            for ch in 0..c {
                let i = (l * c + ch) * plane + px;
                let (a, b) = (target.data()[i].to_f64_lossy(), pred.data()[i].to_f64_lossy());
                dot += a * b;
                nt += a * a;
                np += b * b;
            }
            total += (dot / (nt.sqrt() * np.sqrt() + SAM_EPSILON)).clamp(-1.0, 1.0).acos();
            n += 1;
        }
    }
    Ok(if n == 0 { f64::NAN } else { total / n as f64 })
}

/// The four metrics over all pixels plus the same four over cloud-covered pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mse: f64,
    pub sam: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub masked_mse: Option<f64>,
    pub masked_sam: Option<f64>,
    pub masked_psnr: Option<f64>,
    pub masked_ssim: Option<f64>,
}

/// Evaluates `pred` against `target` (`[..., C, H, W]`); `mask` has the same
/// shape without the channel axis, 1 = cloud.
pub fn evaluate_all<F: Float>(pred: &Tensor<F>, target: &Tensor<F>, mask: &Tensor<F>) -> Result<MetricSet> {
    let mse = mse_f64(pred, target, None)?;
    let masked_mse = Some(mse_f64(pred, target, Some(mask))?).filter(|v| !v.is_nan());
    let masked_sam = Some(sam_f64(pred, target, Some(mask))?).filter(|v| !v.is_nan());
    Ok(MetricSet {
        mse,
        sam: sam_f64(pred, target, None)?,
        psnr: psnr_from_mse(mse),
        ssim: ssim(pred, target)?,
        masked_mse,
        masked_sam,
        masked_psnr: masked_mse.map(psnr_from_mse),
        masked_ssim: ssim_impl(pred, target, Some(mask))?,
    })
}

impl MetricSet {
    /// Elementwise mean; masked fields average over the sets that have them.
    pub fn mean(sets: &[MetricSet]) -> Option<MetricSet> {
        if sets.is_empty() {
            return None;
        }
        let avg = |f: &dyn Fn(&MetricSet) -> f64| sets.iter().map(f).sum::<f64>() / sets.len() as f64;
        let avg_opt = |f: &dyn Fn(&MetricSet) -> Option<f64>| {
            let vals: Vec<f64> = sets.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        Some(MetricSet {
            mse: avg(&|m| m.mse),
            sam: avg(&|m| m.sam),
            psnr: avg(&|m| m.psnr),
            ssim: avg(&|m| m.ssim),
            masked_mse: avg_opt(&|m| m.masked_mse),
            masked_sam: avg_opt(&|m| m.masked_sam),
            masked_psnr: avg_opt(&|m| m.masked_psnr),
            masked_ssim: avg_opt(&|m| m.masked_ssim),
        })
    }
}

pub const REPORT_COLUMNS: [&str; 12] = [
    "variant",
    "clouds",
    "seed",
    "split",
    "mse",
    "sam",
    "psnr",
    "ssim",
    "masked_mse",
    "masked_sam",
    "masked_psnr",
    "masked_ssim",
];

/// One report line. `clouds` and `seed` are `None` on averaged rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub variant: String,
    pub clouds: Option<u32>,
    pub seed: Option<u64>,
    pub split: String,
    #[serde(flatten)]
    pub metrics: MetricSet,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
}

fn csv_opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_else(|| "-".to_string())
}

impl MetricsReport {
    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    /// CSV with [`REPORT_COLUMNS`]; raw (unscaled) values, `-` for missing.
    pub fn to_csv(&self) -> String {
        let mut out = REPORT_COLUMNS.join(",");
        out.push('\n');
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.variant,
                csv_opt(r.clouds),
                csv_opt(r.seed),
                r.split,
                m.mse,
                m.sam,
                m.psnr,
                m.ssim,
                csv_opt(m.masked_mse),
                csv_opt(m.masked_sam),
                csv_opt(m.masked_psnr),
                csv_opt(m.masked_ssim),
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (ext, body) in [("csv", self.to_csv()), ("json", self.to_json()?)] {
            let path = dir.join(format!("{stem}.{ext}"));
            let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(body.as_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Fixed-width table in the published layout: MSE in units of 10⁻³, SAM in 10⁻¹ rad.
    pub fn render_table(&self) -> String {
        let mut out = format!(
            "{:<18} {:>8} {:>14} {:>14} {:>8} {:>6}\n",
            "Model", "# Cloud", "MSE (x1e-3)", "SAM (x1e-1)", "PSNR", "SSIM"
        );
        for r in &self.rows {
            let m = &r.metrics;
            let _ = writeln!(
                out,
                "{:<18} {:>8} {:>14} {:>14} {:>8.3} {:>6.3}",
                r.variant,
                csv_opt(r.clouds),
                render_mse(m.mse),
                render_sam(m.sam),
                m.psnr,
                m.ssim
            );
        }
        out
    }
}

/// MSE rendered in units of 10⁻³ with three decimals.
pub fn render_mse(mse: f64) -> String {
    format!("{:.3}", mse * 1e3)
}

/// SAM rendered in units of 10⁻¹ radians with three decimals.
pub fn render_sam(sam: f64) -> String {
    format!("{:.3}", sam * 10.0)
}
