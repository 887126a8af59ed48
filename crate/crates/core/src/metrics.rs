//! Fidelity metrics: PSNR and SSIM, plus report emission.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same<T: Scalar>(op: &'static str, x: &Tensor<T>, y: &Tensor<T>) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch { op, lhs: x.shape().to_vec(), rhs: y.shape().to_vec() });
    }
    if x.is_empty() {
        return Err(Error::InvalidArgument(format!("{op}: empty image")));
    }
    Ok(())
}

/// `10 log10(max^2 / mse)`, capped at 100 dB.
pub fn psnr<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>, max_value: f64) -> Result<f64> {
    check_same("psnr", x, y)?;
    let mse = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum::<f64>()
        / x.len() as f64;
    Ok(psnr_from_mse(mse, max_value))
}

pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (max_value * max_value / mse).log10()).min(PSNR_CAP_DB)
}

/// Normalized 1-D Gaussian taps.
fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..k).map(|t| taps[t] * plane[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..k).map(|t| taps[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Splits an image tensor `(C, H, W)` or `(N, C, H, W)` into channel-mean
/// grayscale planes.
fn gray_planes<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<Vec<f64>>, usize, usize)> {
    let (n, c, h, w) = match *x.shape() {
        [c, h, w] => (1, c, h, w),
        [n, c, h, w] => (n, c, h, w),
        _ => {
            return Err(Error::InvalidShape {
                op: "ssim",
                shape: x.shape().to_vec(),
                reason: "expected (C, H, W) or (N, C, H, W)".into(),
            })
        }
    };
    let plane = h * w;
    let planes = (0..n)
        .map(|b| {
            (0..plane)
                .map(|p| (0..c).map(|ch| x.data()[(b * c + ch) * plane + p].as_f64()).sum::<f64>() / c as f64)
                .collect()
        })
        .collect();
    Ok((planes, h, w))
}

/// Mean local SSIM over valid window positions, averaged over the batch.
pub fn ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    check_same("ssim", x, y)?;
    let (px, h, w) = gray_planes(x)?;
    let (py, _, _) = gray_planes(y)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidShape {
            op: "ssim",
            shape: x.shape().to_vec(),
            reason: format!("image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"),
        });
    }
    let taps = gaussian_taps();
    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let mut total = 0.0;
    for (a, b) in px.iter().zip(&py) {
        let prod = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).collect::<Vec<_>>();
        let mu_a = filter_valid(a, h, w, &taps);
        let mu_b = filter_valid(b, h, w, &taps);
        let aa = filter_valid(&prod(a, a), h, w, &taps);
        let bb = filter_valid(&prod(b, b), h, w, &taps);
        let ab = filter_valid(&prod(a, b), h, w, &taps);
        let mut sum = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok(total / px.len() as f64)
}

/// Metrics of one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lpips: Option<f64>,
}

impl ImageMetrics {
    pub fn measure<T: Scalar>(id: impl Into<String>, output: &Tensor<T>, target: &Tensor<T>) -> Result<Self> {
        Ok(Self { id: id.into(), psnr_db: psnr(output, target, 1.0)?, ssim: ssim(output, target)?, lpips: None })
    }
}

/// Per-image metrics with dataset means.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub images: Vec<ImageMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub count: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl MetricReport {
    pub fn push(&mut self, m: ImageMetrics) {
        self.images.push(m);
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn mean_psnr(&self) -> f64 {
        mean(self.images.iter().map(|m| m.psnr_db))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.images.iter().map(|m| m.ssim))
    }

    /// Mean LPIPS, present only when every image carries a value.
    pub fn mean_lpips(&self) -> Option<f64> {
        let vals: Option<Vec<f64>> = self.images.iter().map(|m| m.lpips).collect();
        vals.filter(|v| !v.is_empty()).map(|v| mean(v.into_iter()))
    }

    pub fn summary(&self) -> MetricSummary {
        MetricSummary {
            count: self.len(),
            psnr_db: self.mean_psnr(),
            ssim: self.mean_ssim(),
            lpips: self.mean_lpips(),
        }
    }

    /// Merges externally computed LPIPS values by image id.
    pub fn merge_lpips(&mut self, values: &[(String, f64)]) -> Result<()> {
        for (id, v) in values {
            let m = self
                .images
                .iter_mut()
                .find(|m| &m.id == id)
                .ok_or_else(|| Error::InvalidArgument(format!("no image {id} in report")))?;
            m.lpips = Some(*v);
        }
        Ok(())
    }

    /// `image_id,psnr_db,ssim[,lpips]` rows.
    pub fn to_csv(&self) -> String {
        let with_lpips = self.images.iter().any(|m| m.lpips.is_some());
        let mut s = String::from(if with_lpips { "image_id,psnr_db,ssim,lpips\n" } else { "image_id,psnr_db,ssim\n" });
        for m in &self.images {
            s.push_str(&format!("{},{:.6},{:.6}", m.id, m.psnr_db, m.ssim));
            if with_lpips {
                s.push_str(&m.lpips.map(|v| format!(",{v:.6}")).unwrap_or_else(|| ",".into()));
            }
            s.push('\n');
        }
        s
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary())?)
    }
}

/// One labelled row of a comparison table (per task plus an average row).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub count: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
}

/// Rows per labelled report followed by an `average` row over the rows.
pub fn task_table(reports: &[(String, MetricReport)]) -> Vec<TableRow> {
    let mut rows: Vec<TableRow> = reports
        .iter()
        .map(|(label, r)| {
            let s = r.summary();
            TableRow { label: label.clone(), count: s.count, psnr_db: s.psnr_db, ssim: s.ssim, lpips: s.lpips }
        })
        .collect();
    if !rows.is_empty() {
        let lp: Option<Vec<f64>> = rows.iter().map(|r| r.lpips).collect();
        rows.push(TableRow {
            label: "average".into(),
            count: rows.iter().map(|r| r.count).sum(),
            psnr_db: mean(rows.iter().map(|r| r.psnr_db)),
            ssim: mean(rows.iter().map(|r| r.ssim)),
            lpips: lp.map(|v| mean(v.into_iter())),
        });
    }
    rows
}

pub fn table_csv(rows: &[TableRow]) -> String {
    let mut s = String::from("task,count,psnr_db,ssim,lpips\n");
    for r in rows {
        let lp = r.lpips.map(|v| format!("{v:.6}")).unwrap_or_default();
        s.push_str(&format!("{},{},{:.6},{:.6},{}\n", r.label, r.count, r.psnr_db, r.ssim, lp));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn img(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([3, h, w], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn psnr_examples() {
        let z = Tensor::<f64>::zeros([1, 1, 2, 2]);
        let a = Tensor::<f64>::full([1, 1, 2, 2], 0.1);
        let one = Tensor::<f64>::ones([1, 1, 2, 2]);
        assert!((psnr(&a, &z, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);
        assert_eq!(psnr(&one, &z, 1.0).unwrap(), 0.0);
        assert!(psnr(&a, &Tensor::zeros([4]), 1.0).is_err());
    }

    /// Direct per-window SSIM with explicit 2-D weights.
    fn ssim_oracle(x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
        let (_, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let gray = |t: &Tensor<f64>, i: usize, j: usize| (0..3).map(|c| t.data()[c * h * w + i * w + j]).sum::<f64>() / 3.0;
        let mut win = [[0.0; 11]; 11];
        let mut s = 0.0;
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
                *v = (-(di * di + dj * dj) / 4.5).exp();
                s += *v;
            }
        }
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..=h - 11 {
            for j in 0..=w - 11 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for a in 0..11 {
                    for b in 0..11 {
                        let wt = win[a][b] / s;
                        let (p, q) = (gray(x, i + a, j + b), gray(y, i + a, j + b));
                        mx += wt * p;
                        my += wt * q;
                        xx += wt * p * p;
                        yy += wt * q * q;
                        xy += wt * p * q;
                    }
                }
                let (vx, vy, cv) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += (2.0 * mx * my + c1) * (2.0 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_direct_windows() {
        for seed in 0..5 {
            let x = img(seed, 16, 14);
            let y = x.map(|v| (v * 0.7 + 0.1).min(1.0));
            let z = img(seed + 100, 16, 14);
            assert!((ssim(&x, &y).unwrap() - ssim_oracle(&x, &y)).abs() < 1e-10);
            assert!((ssim(&x, &z).unwrap() - ssim_oracle(&x, &z)).abs() < 1e-10);
        }
    }

    #[test]
    fn ssim_examples() {
        let x = img(1, 16, 16);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let z = Tensor::<f64>::zeros([3, 16, 16]);
        let o = Tensor::<f64>::ones([3, 16, 16]);
        let closed = 1e-4 / (1.0 + 1e-4);
        assert!((ssim(&z, &o).unwrap() - closed).abs() < 1e-12);
        assert!(ssim(&Tensor::<f64>::zeros([3, 8, 16]), &Tensor::zeros([3, 8, 16])).is_err());
        let batch = Tensor::stack(&[&x, &z]).unwrap();
        let batch2 = Tensor::stack(&[&x, &o]).unwrap();
        assert!((ssim(&batch, &batch2).unwrap() - (1.0 + closed) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn report_means_and_csv() {
        let mut r = MetricReport::default();
        r.push(ImageMetrics { id: "a".into(), psnr_db: 20.0, ssim: 0.5, lpips: None });
        r.push(ImageMetrics { id: "b".into(), psnr_db: 30.0, ssim: 0.7, lpips: None });
        assert_eq!(r.mean_psnr(), 25.0);
        assert!((r.mean_ssim() - 0.6).abs() < 1e-12);
        assert_eq!(r.mean_lpips(), None);
        assert_eq!(r.to_csv(), "image_id,psnr_db,ssim\na,20.000000,0.500000\nb,30.000000,0.700000\n");
        let s: serde_json::Value = serde_json::from_str(&r.summary_json().unwrap()).unwrap();
        assert_eq!(s["psnr_db"], 25.0);
        assert!(s["lpips"].is_null());
        r.merge_lpips(&[("a".into(), 0.1), ("b".into(), 0.3)]).unwrap();
        assert!((r.mean_lpips().unwrap() - 0.2).abs() < 1e-12);
        assert!(r.to_csv().starts_with("image_id,psnr_db,ssim,lpips\na,20.000000,0.500000,0.100000\n"));
        assert!(r.merge_lpips(&[("zz".into(), 0.0)]).is_err());
    }

    #[test]
    fn table_average_is_mean_of_rows() {
        let mk = |p: f64, n: usize| MetricReport {
            images: (0..n).map(|i| ImageMetrics { id: i.to_string(), psnr_db: p + i as f64, ssim: 0.5, lpips: None }).collect(),
        };
        let rows = task_table(&[("a".into(), mk(20.0, 2)), ("b".into(), mk(30.0, 4))]);
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2].label, "average");
        assert!((rows[2].psnr_db - (rows[0].psnr_db + rows[1].psnr_db) / 2.0).abs() < 1e-12);
        assert_eq!(rows[2].count, 6);
        assert!(table_csv(&rows).starts_with("task,count,psnr_db,ssim,lpips\na,2,20.5"));
    }

    proptest! {
        #[test]
        fn psnr_decreases_with_mse(a in 1e-9f64..10.0, b in 1e-9f64..10.0) {
            prop_assume!((a - b).abs() > 1e-12 * a.max(b));
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let (p_lo, p_hi) = (psnr_from_mse(lo, 1.0), psnr_from_mse(hi, 1.0));
            prop_assert!(p_lo > p_hi || p_lo == PSNR_CAP_DB);
        }

        #[test]
        fn ssim_self_is_one(seed in 0u64..1000, h in 11usize..20, w in 11usize..20) {
            let x = img(seed, h, w);
            prop_assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn ssim_is_symmetric(seed in 0u64..1000) {
            let (x, y) = (img(seed, 12, 13), img(seed + 1, 12, 13));
            prop_assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn metrics_invariant_to_joint_translation(seed in 0u64..1000, dy in 0usize..4, dx in 0usize..4) {
            // the same content placed at two offsets inside larger canvases,
            // compared on the overlap
            let (x, y) = (img(seed, 14, 14), img(seed + 7, 14, 14));
            let place = |t: &Tensor<f64>, oy: usize, ox: usize| {
                let mut out = Tensor::<f64>::zeros([3, 18, 18]);
                for c in 0..3 { for i in 0..14 { for j in 0..14 {
                    out.data_mut()[c * 324 + (i + oy) * 18 + j + ox] = t.data()[c * 196 + i * 14 + j];
                }}}
                out
            };
            let crop = |t: &Tensor<f64>, oy: usize, ox: usize| {
                Tensor::from_fn([3, 14, 14], |k| { let (c, i, j) = (k / 196, (k / 14) % 14, k % 14); t.data()[c * 324 + (i + oy) * 18 + j + ox] })
            };
            let (xs, ys) = (place(&x, dy, dx), place(&y, dy, dx));
            let (xc, yc) = (crop(&xs, dy, dx), crop(&ys, dy, dx));
            prop_assert!((psnr(&xc, &yc, 1.0).unwrap() - psnr(&x, &y, 1.0).unwrap()).abs() < 1e-12);
            prop_assert!((ssim(&xc, &yc).unwrap() - ssim(&x, &y).unwrap()).abs() < 1e-12);
        }
    }
}
