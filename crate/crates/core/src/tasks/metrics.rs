use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::field::{ensure_same_shape, Field};

/// Peak-to-peak range of `[-1, 1]` images.
pub const DYNAMIC_RANGE: f64 = 2.0;
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

pub fn mse(a: &Field, b: &Field) -> Result<f64> {
    ensure_same_shape(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

pub fn mae(a: &Field, b: &Field) -> Result<f64> {
    ensure_same_shape(a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
}

/// `10 log10(L^2 / mse)`; `+inf` for identical inputs.
pub fn psnr(a: &Field, b: &Field) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (DYNAMIC_RANGE * DYNAMIC_RANGE / e).log10())
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let centre = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - centre).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian filter over all fully contained windows.
fn filter_valid(img: ArrayView2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let rows = Array2::from_shape_fn((h, ow), |(y, x)| (0..k).map(|i| g[i] * img[[y, x + i]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(y, x)| (0..k).map(|i| g[i] * rows[[y + i, x]]).sum::<f64>())
}

/// Mean structural similarity over channels and valid windows with
/// Gaussian weighting.
pub fn ssim(a: &Field, b: &Field, window: usize) -> Result<f64> {
    ensure_same_shape(a, b)?;
    if window % 2 == 0 || window == 0 {
        return Err(Error::param("window", format!("{window} must be odd")));
    }
    let (h, w) = (a.shape()[1], a.shape()[2]);
    if h < window || w < window {
        return Err(Error::param(
            "window",
            format!("image {h}x{w} is smaller than the {window}x{window} window"),
        ));
    }
    let c1 = (0.01 * DYNAMIC_RANGE).powi(2);
    let c2 = (0.03 * DYNAMIC_RANGE).powi(2);
    let g = gaussian_window(window);
    let mut total = 0.0;
    let mut count = 0usize;
    for (pa, pb) in a.outer_iter().zip(b.outer_iter()) {
        let mu_a = filter_valid(pa, &g);
        let mu_b = filter_valid(pb, &g);
        let aa = filter_valid((&pa * &pa).view(), &g);
        let bb = filter_valid((&pb * &pb).view(), &g);
        let ab = filter_valid((&pa * &pb).view(), &g);
        for (((&ma, &mb), (&saa, &sbb)), &sab) in mu_a
            .iter()
            .zip(mu_b.iter())
            .zip(aa.iter().zip(bb.iter()))
            .zip(ab.iter())
        {
            let var_a = saa - ma * ma;
            let var_b = sbb - mb * mb;
            let cov = sab - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegMetrics {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
    pub hausdorff: f64,
}

fn foreground(mask: ArrayView2<f64>) -> Vec<(f64, f64)> {
    mask.indexed_iter()
        .filter(|(_, &v)| v > 0.0)
        .map(|((y, x), _)| (y as f64, x as f64))
        .collect()
}

fn directed_hausdorff(from: &[(f64, f64)], to: &[(f64, f64)]) -> f64 {
    from.iter()
        .map(|a| {
            to.iter()
                .map(|b| (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
        .sqrt()
}

/// Overlap and boundary metrics of two masks, each binarised at `> 0`.
///
/// Both empty: dice, iou, precision and recall are 1 and the distance is 0.
/// Exactly one empty: overlap scores are 0 and the distance is the image
/// diagonal.
pub fn seg_metrics(pred: ArrayView2<f64>, truth: ArrayView2<f64>) -> Result<SegMetrics> {
    if pred.dim() != truth.dim() {
        return Err(Error::dims(truth.shape(), pred.shape()));
    }
    let (mut tp, mut fp, mut fne) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        match (p > 0.0, t > 0.0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fne += 1,
            (false, false) => {}
        }
    }
    let (h, w) = pred.dim();
    let diagonal = ((h * h + w * w) as f64).sqrt();
    let pred_pts = foreground(pred);
    let true_pts = foreground(truth);
    match (pred_pts.is_empty(), true_pts.is_empty()) {
        (true, true) => {
            return Ok(SegMetrics {
                dice: 1.0,
                iou: 1.0,
                precision: 1.0,
                recall: 1.0,
                hausdorff: 0.0,
            })
        }
        (true, false) | (false, true) => {
            return Ok(SegMetrics {
                dice: 0.0,
                iou: 0.0,
                precision: 0.0,
                recall: 0.0,
                hausdorff: diagonal,
            })
        }
        (false, false) => {}
    }
    let (tp, fp, fne) = (tp as f64, fp as f64, fne as f64);
    Ok(SegMetrics {
        dice: 2.0 * tp / (2.0 * tp + fp + fne),
        iou: tp / (tp + fp + fne),
        precision: tp / (tp + fp),
        recall: tp / (tp + fne),
        hausdorff: directed_hausdorff(&pred_pts, &true_pts).max(directed_hausdorff(&true_pts, &pred_pts)),
    })
}

/// Per-pair metric rows with mean and standard deviation per column.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub names: Vec<&'static str>,
    pub rows: Vec<Vec<f64>>,
}

impl MetricReport {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.names.iter().position(|n| *n == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    /// Arithmetic mean of a column.
    pub fn mean(&self, name: &str) -> Option<f64> {
        let col = self.column(name)?;
        Some(col.iter().sum::<f64>() / col.len() as f64)
    }

    /// Population standard deviation of a column.
    pub fn std(&self, name: &str) -> Option<f64> {
        let col = self.column(name)?;
        let m = self.mean(name)?;
        if m.is_infinite() {
            return Some(0.0);
        }
        Some((col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / col.len() as f64).sqrt())
    }

    /// Header, one row per pair, then an `aggregate` row holding means in the
    /// metric columns and standard deviations in the `_std` columns.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["pair".to_string()];
        header.extend(self.names.iter().map(|n| n.to_string()));
        header.extend(self.names.iter().map(|n| format!("{n}_std")));
        w.write_record(&header)?;
        for (i, row) in self.rows.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            rec.extend(self.names.iter().map(|_| String::new()));
            w.write_record(&rec)?;
        }
        let mut agg = vec!["aggregate".to_string()];
        agg.extend(self.names.iter().map(|n| self.mean(n).unwrap_or(f64::NAN).to_string()));
        agg.extend(self.names.iter().map(|n| self.std(n).unwrap_or(f64::NAN).to_string()));
        w.write_record(&agg)?;
        w.flush()?;
        Ok(())
    }
}

/// Image metrics for every pair, plus segmentation metrics on channel 0 when
/// masks are given.
pub fn evaluate_pairs(
    generated: &[Field],
    references: &[Field],
    masks: Option<&[Array2<f64>]>,
) -> Result<MetricReport> {
    if generated.len() != references.len() {
        return Err(Error::dims(&[references.len()], &[generated.len()]));
    }
    let mut names = vec!["psnr", "ssim", "mse", "mae"];
    if masks.is_some() {
        names.extend(["dice", "iou", "precision", "recall", "hausdorff"]);
    }
    let mut rows = Vec::with_capacity(generated.len());
    for (i, (g, r)) in generated.iter().zip(references).enumerate() {
        let window = SSIM_WINDOW.min(odd_floor(g.shape()[1].min(g.shape()[2])));
        let mut row = vec![psnr(g, r)?, ssim(g, r, window)?, mse(g, r)?, mae(g, r)?];
        if let Some(masks) = masks {
            let s = seg_metrics(g.index_axis(ndarray::Axis(0), 0), masks[i].view())?;
            row.extend([s.dice, s.iou, s.precision, s.recall, s.hausdorff]);
        }
        rows.push(row);
    }
    Ok(MetricReport { names, rows })
}

fn odd_floor(n: usize) -> usize {
    if n % 2 == 1 {
        n
    } else {
        n - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(shape: (usize, usize, usize), seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0))
    }

    /// Per-window loop with explicit weights, no separable filtering.
    fn ssim_reference(a: &Field, b: &Field, window: usize) -> f64 {
        let sigma = 1.5;
        let half = window / 2;
        let mut weights = vec![vec![0.0; window]; window];
        let mut total_w = 0.0;
        for (i, row) in weights.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                let dy = i as f64 - half as f64;
                let dx = j as f64 - half as f64;
                *v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                total_w += *v;
            }
        }
        let c1 = (0.01f64 * 2.0).powi(2);
        let c2 = (0.03f64 * 2.0).powi(2);
        let (c, h, w) = a.dim();
        let mut sum = 0.0;
        let mut n = 0;
        for ch in 0..c {
            for y in 0..=h - window {
                for x in 0..=w - window {
                    let (mut ma, mut mb) = (0.0, 0.0);
                    for i in 0..window {
                        for j in 0..window {
                            let wt = weights[i][j] / total_w;
                            ma += wt * a[[ch, y + i, x + j]];
                            mb += wt * b[[ch, y + i, x + j]];
                        }
                    }
                    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                    for i in 0..window {
                        for j in 0..window {
                            let wt = weights[i][j] / total_w;
                            let da = a[[ch, y + i, x + j]] - ma;
                            let db = b[[ch, y + i, x + j]] - mb;
                            va += wt * da * da;
                            vb += wt * db * db;
                            cov += wt * da * db;
                        }
                    }
                    sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    n += 1;
                }
            }
        }
        sum / n as f64
    }

    #[test]
    fn pixel_metric_examples() {
        let a = random_field((1, 8, 8), 1);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = &a + 0.2;
        assert!((mse(&a, &b).unwrap() - 0.04).abs() < 1e-12);
        assert!((mae(&a, &b).unwrap() - 0.2).abs() < 1e-12);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let a = random_field((1, 16, 16), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = crate::field::standard_normal([1, 16, 16], &mut rng);
        let values: Vec<f64> = [0.01, 0.05, 0.1].iter().map(|s| psnr(&a, &(&a + &(&z * *s))).unwrap()).collect();
        assert!(values.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn ssim_examples() {
        let a = random_field((2, 20, 24), 4);
        assert_eq!(ssim(&a, &a, 11).unwrap(), 1.0);
        let checker = Field::from_shape_fn((1, 20, 20), |(_, y, x)| if (x + y) % 2 == 0 { 0.5 } else { -0.5 });
        assert!(ssim(&checker, &(-&checker), 11).unwrap() < -0.95);
        let b = random_field((2, 20, 24), 5);
        let fast = ssim(&a, &b, 11).unwrap();
        let slow = ssim_reference(&a, &b, 11);
        assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
        let c = &a * 0.7 + &b * 0.3;
        assert!((ssim(&a, &c, 7).unwrap() - ssim_reference(&a, &c, 7)).abs() < 1e-6);
        assert!(ssim(&random_field((1, 8, 8), 0), &random_field((1, 8, 8), 1), 11).is_err());
        assert!(ssim(&a, &b, 10).is_err());
    }

    #[test]
    fn seg_examples() {
        let mut truth = Array2::from_elem((12, 12), -1.0);
        for y in 3..6 {
            for x in 2..8 {
                truth[[y, x]] = 1.0;
            }
        }
        let same = seg_metrics(truth.view(), truth.view()).unwrap();
        assert_eq!((same.dice, same.iou, same.hausdorff), (1.0, 1.0, 0.0));

        let mut disjoint = Array2::from_elem((12, 12), -1.0);
        for y in 8..11 {
            for x in 2..8 {
                disjoint[[y, x]] = 1.0;
            }
        }
        let d = seg_metrics(disjoint.view(), truth.view()).unwrap();
        assert_eq!((d.dice, d.iou), (0.0, 0.0));

        let mut shifted = Array2::from_elem((12, 12), -1.0);
        for y in 3..6 {
            for x in 5..11 {
                shifted[[y, x]] = 1.0;
            }
        }
        let s = seg_metrics(shifted.view(), truth.view()).unwrap();
        assert!((s.hausdorff - 3.0).abs() < 1e-12);
        assert!(s.dice >= s.iou);
        assert!((s.dice - 2.0 * s.iou / (1.0 + s.iou)).abs() < 1e-12);

        let empty = Array2::from_elem((12, 12), -1.0);
        let both = seg_metrics(empty.view(), empty.view()).unwrap();
        assert_eq!((both.dice, both.iou, both.hausdorff), (1.0, 1.0, 0.0));
        let one = seg_metrics(empty.view(), truth.view()).unwrap();
        assert_eq!((one.dice, one.iou), (0.0, 0.0));
        assert!((one.hausdorff - (288.0f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn report_aggregates() {
        let a: Vec<Field> = (0..4).map(|i| random_field((1, 12, 12), i)).collect();
        let b: Vec<Field> = (0..4).map(|i| random_field((1, 12, 12), i + 10)).collect();
        let r = evaluate_pairs(&a, &b, None).unwrap();
        let col = r.column("mse").unwrap();
        assert!((r.mean("mse").unwrap() - col.iter().sum::<f64>() / 4.0).abs() < 1e-12);
        let same = evaluate_pairs(&a, &a, None).unwrap();
        assert!(same.column("ssim").unwrap().iter().all(|&v| v == 1.0));
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.lines().last().unwrap().starts_with("aggregate,"));
    }
}
