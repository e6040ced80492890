//! Anomaly maps and detection metrics: image- and pixel-level AUROC and the
//! per-region-overlap curve area (AUPRO).

use crate::error::{Error, Result};
use crate::kernels::mirror;
use crate::tensor::Tensor;

const KERNEL_RADIUS: usize = 2;

/// Normalized 1-D Gaussian taps, σ = 1, radius 2; the 5×5 kernel is their
/// outer product.
pub fn gaussian_taps() -> [f64; 5] {
    let mut t = [0.0; 5];
    for (i, v) in t.iter_mut().enumerate() {
        let x = i as f64 - KERNEL_RADIUS as f64;
        *v = (-x * x / 2.0).exp();
    }
    let s: f64 = t.iter().sum();
    t.map(|v| v / s)
}

/// Separable Gaussian smoothing of an `[H × W]` map with mirror padding.
pub fn smooth(map: &Tensor) -> Result<Tensor> {
    let [h, w] = *map.shape() else {
        return Err(Error::Shape(format!("expected a 2-D map, got {:?}", map.shape())));
    };
    let taps = gaussian_taps();
    let r = KERNEL_RADIUS as isize;
    let src: Vec<f64> = map.data().iter().map(|&v| v as f64).collect();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r)
                .map(|k| taps[(k + r) as usize] * src[y * w + mirror(x as isize + k, w)])
                .sum();
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r)
                .map(|k| taps[(k + r) as usize] * tmp[mirror(y as isize + k, h) * w + x])
                .sum::<f64>() as f32;
        }
    }
    Tensor::new(&[h, w], out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    pub map: Tensor,
    pub score: f32,
}

/// Smoothed squared error; the image score is the map maximum.
pub fn anomaly_map(x_norm: &Tensor, recon: &Tensor) -> Result<AnomalyMap> {
    if x_norm.shape() != recon.shape() {
        return Err(Error::dim("anomaly_map", x_norm.shape(), recon.shape()));
    }
    let sq = Tensor::new(
        x_norm.shape(),
        x_norm
            .data()
            .iter()
            .zip(recon.data())
            .map(|(a, b)| (a - b) * (a - b))
            .collect(),
    )?;
    let map = smooth(&sq)?;
    let score = map.data().iter().copied().fold(0.0f32, f32::max);
    Ok(AnomalyMap { map, score })
}

fn check_classes(labels: &[bool]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    Ok((pos, neg))
}

/// Mann-Whitney AUROC with average ranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("auroc", &[scores.len()], &[labels.len()]));
    }
    let (pos, neg) = check_classes(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// 4-connected components of `mask > 0.5`; returns a label per pixel
/// (`0` = background) and the number of components.
pub fn label_regions(mask: &Tensor) -> Result<(Vec<usize>, usize)> {
    let [h, w] = *mask.shape() else {
        return Err(Error::Shape(format!("expected a 2-D mask, got {:?}", mask.shape())));
    };
    let m = mask.data();
    let mut label = vec![0usize; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if m[start] <= 0.5 || label[start] != 0 {
            continue;
        }
        count += 1;
        label[start] = count;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if m[q] > 0.5 && label[q] == 0 {
                    label[q] = count;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
    }
    Ok((label, count))
}

/// Maps with at most this many pixels are swept at every distinct score.
pub const EXACT_SWEEP_PIXELS: usize = 256;
pub const QUANTILE_THRESHOLDS: usize = 200;

/// Normalized area under the PRO-vs-FPR curve up to `fpr_limit`.
pub fn aupro(maps: &[Tensor], masks: &[Tensor], fpr_limit: f64) -> Result<f64> {
    if maps.len() != masks.len() {
        return Err(Error::dim("aupro", &[maps.len()], &[masks.len()]));
    }
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::Parameter(format!("FPR limit {fpr_limit} outside (0, 1]")));
    }
    // (score, region id or usize::MAX for normal pixels)
    let mut pixels: Vec<(f64, usize)> = Vec::new();
    let mut region_size: Vec<usize> = Vec::new();
    for (map, mask) in maps.iter().zip(masks) {
        if map.shape() != mask.shape() {
            return Err(Error::dim("aupro", map.shape(), mask.shape()));
        }
        let (labels, count) = label_regions(mask)?;
        let base = region_size.len();
        region_size.extend(std::iter::repeat_n(0, count));
        for (&s, &l) in map.data().iter().zip(&labels) {
            if l == 0 {
                pixels.push((s as f64, usize::MAX));
            } else {
                region_size[base + l - 1] += 1;
                pixels.push((s as f64, base + l - 1));
            }
        }
    }
    if region_size.is_empty() {
        return Err(Error::UndefinedMetric("AUPRO needs at least one anomalous region".into()));
    }
    let normal = pixels.iter().filter(|p| p.1 == usize::MAX).count();
    if normal == 0 {
        return Err(Error::UndefinedMetric("AUPRO needs normal pixels".into()));
    }
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let exact = maps.iter().all(|m| m.len() <= EXACT_SWEEP_PIXELS);
    let thresholds: Vec<f64> = if exact {
        let mut t: Vec<f64> = pixels.iter().map(|p| p.0).collect();
        t.dedup();
        t
    } else {
        let n = pixels.len();
        let mut t: Vec<f64> = (0..QUANTILE_THRESHOLDS)
            .map(|i| pixels[(i * (n - 1)) / (QUANTILE_THRESHOLDS - 1)].0)
            .collect();
        t.dedup();
        t
    };
    let regions = region_size.len() as f64;
    let mut curve = vec![(0.0f64, 0.0f64)];
    let (mut fp, mut pro_sum, mut at) = (0usize, 0.0f64, 0usize);
    for &t in &thresholds {
        while at < pixels.len() && pixels[at].0 >= t {
            match pixels[at].1 {
                usize::MAX => fp += 1,
                r => pro_sum += 1.0 / region_size[r] as f64,
            }
            at += 1;
        }
        curve.push((fp as f64 / normal as f64, pro_sum / regions));
    }
    curve.push((1.0, 1.0));
    Ok(integrate(&curve, fpr_limit) / fpr_limit)
}

/// Trapezoid area under a curve sorted by x, truncated at `limit` with
/// linear interpolation.
pub fn integrate(curve: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
            area += (limit - x0) * (y0 + y) / 2.0;
            break;
        }
    }
    area
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaseScore {
    pub id: String,
    pub label: bool,
    pub score: f32,
    pub pose: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub o_auroc: f64,
    pub p_auroc: f64,
    pub aupro: f64,
    pub n_normal: usize,
    pub n_defect: usize,
    pub cases: Vec<CaseScore>,
}

/// Metrics from per-case anomaly maps and ground-truth masks.
pub fn report(cases: Vec<CaseScore>, maps: &[Tensor], masks: &[Tensor]) -> Result<EvalReport> {
    let labels: Vec<bool> = cases.iter().map(|c| c.label).collect();
    let scores: Vec<f64> = cases.iter().map(|c| c.score as f64).collect();
    let o_auroc = auroc(&scores, &labels)?;
    let mut px_scores = Vec::new();
    let mut px_labels = Vec::new();
    for (m, k) in maps.iter().zip(masks) {
        px_scores.extend(m.data().iter().map(|&v| v as f64));
        px_labels.extend(k.data().iter().map(|&v| v > 0.5));
    }
    let p_auroc = auroc(&px_scores, &px_labels)?;
    let aupro = aupro(maps, masks, 0.3)?;
    let n_defect = labels.iter().filter(|&&l| l).count();
    Ok(EvalReport {
        o_auroc,
        p_auroc,
        aupro,
        n_normal: labels.len() - n_defect,
        n_defect,
        cases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auroc_hand_cases() {
        let l = [false, false, true, true];
        assert_eq!(auroc(&[1., 2., 3., 4.], &l).unwrap(), 1.0);
        assert_eq!(auroc(&[4., 3., 2., 1.], &l).unwrap(), 0.0);
        assert_eq!(auroc(&[1., 1.], &[false, true]).unwrap(), 0.5);
        assert!(matches!(auroc(&[1., 2.], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn zero_error_gives_zero_map() {
        let x = Tensor::full(&[8, 8], 0.3);
        let a = anomaly_map(&x, &x).unwrap();
        assert_eq!(a.score, 0.0);
        assert!(a.map.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_peak_is_centre_weight() {
        let mut x = Tensor::zeros(&[9, 9]);
        x.data_mut()[4 * 9 + 4] = 0.5;
        let a = anomaly_map(&x, &Tensor::zeros(&[9, 9])).unwrap();
        let t = gaussian_taps();
        let expect = 0.25 * t[2] * t[2];
        assert!((a.score as f64 - expect).abs() < 1e-7);
    }

    #[test]
    fn regions_are_four_connected() {
        // diagonal neighbours form two regions
        let m = Tensor::new(&[2, 2], vec![1., 0., 0., 1.]).unwrap();
        assert_eq!(label_regions(&m).unwrap().1, 2);
        let m = Tensor::new(&[2, 2], vec![1., 1., 0., 1.]).unwrap();
        assert_eq!(label_regions(&m).unwrap().1, 1);
    }

    #[test]
    fn aupro_perfect_and_constant() {
        let mut mask = Tensor::zeros(&[6, 6]);
        mask.data_mut()[7] = 1.0;
        mask.data_mut()[8] = 1.0;
        assert!((aupro(&[mask.clone()], &[mask.clone()], 0.3).unwrap() - 1.0).abs() < 1e-12);
        let flat = Tensor::full(&[6, 6], 0.2);
        assert!((aupro(&[flat], &[mask], 0.3).unwrap() - 0.15).abs() < 1e-12);
        let empty = Tensor::zeros(&[6, 6]);
        assert!(matches!(
            aupro(&[empty.clone()], &[empty], 0.3),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn integrate_truncates_with_interpolation() {
        let c = [(0.0, 0.0), (1.0, 1.0)];
        assert!((integrate(&c, 0.5) - 0.125).abs() < 1e-12);
    }
}
