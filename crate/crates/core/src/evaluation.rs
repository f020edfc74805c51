//! IoU-to-recall curves, average precision, and the size-bucket hit/miss report.
//!
//! Every function takes per-image lists aligned by index: `dets[i]` and
//! `gts[i]` belong to the same image.

use std::fmt::Write as _;

use crate::anchors::{box_iou, BBox};
use crate::error::{Error, Result};
use crate::inference::Detection;

/// The default grid `0.50, 0.55, ..., 1.00`.
pub fn default_thresholds() -> Vec<f64> {
    (0..=10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecallCurve {
    pub thresholds: Vec<f64>,
    pub recall: Vec<f64>,
    /// Mean recall over the grid.
    pub auc: f64,
}

impl RecallCurve {
    pub fn is_monotone(&self) -> bool {
        self.recall.windows(2).all(|w| w[1] <= w[0])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,recall\n");
        for (t, r) in self.thresholds.iter().zip(&self.recall) {
            let _ = writeln!(s, "{t:.2},{r:.6}");
        }
        s
    }
}

fn gt_count(gts: &[Vec<BBox>]) -> Result<usize> {
    let n: usize = gts.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(Error::Degenerate("no ground-truth boxes; recall is undefined".into()));
    }
    Ok(n)
}

fn check_aligned<T>(a: &[T], gts: &[Vec<BBox>]) -> Result<()> {
    if a.len() != gts.len() {
        return Err(Error::Validation(format!("{} prediction lists for {} images", a.len(), gts.len())));
    }
    Ok(())
}

/// Recall of ground truths whose best proposal reaches each threshold.
pub fn iou_recall_curve(proposals: &[Vec<BBox>], gts: &[Vec<BBox>], thresholds: &[f64]) -> Result<RecallCurve> {
    check_aligned(proposals, gts)?;
    let total = gt_count(gts)? as f64;
    if thresholds.is_empty() || thresholds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Validation("thresholds must be nonempty and ascending".into()));
    }
    let best: Vec<f64> = proposals
        .iter()
        .zip(gts)
        .flat_map(|(ps, gs)| gs.iter().map(move |g| ps.iter().map(|p| box_iou(p, g)).fold(0.0, f64::max)))
        .collect();
    let recall: Vec<f64> = thresholds
        .iter()
        .map(|&t| best.iter().filter(|&&b| b >= t).count() as f64 / total)
        .collect();
    let auc = recall.iter().sum::<f64>() / recall.len() as f64;
    let curve = RecallCurve { thresholds: thresholds.to_vec(), recall, auc };
    debug_assert!(curve.is_monotone());
    Ok(curve)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    /// `(recall, precision)` after each ranked detection.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

impl PrCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("recall,precision\n");
        for (r, p) in &self.points {
            let _ = writeln!(s, "{r:.6},{p:.6}");
        }
        s
    }
}

/// Ranks every detection by score (ties by image order, then list order) and
/// marks each true or false positive by greedy matching.
fn rank_and_match(dets: &[Vec<Detection>], gts: &[Vec<BBox>], iou_thresh: f64) -> Vec<bool> {
    let mut ranked: Vec<(usize, &Detection)> = dets.iter().enumerate().flat_map(|(i, d)| d.iter().map(move |x| (i, x))).collect();
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    ranked
        .iter()
        .map(|(img, d)| {
            let mut best: Option<(f64, usize)> = None;
            for (j, g) in gts[*img].iter().enumerate() {
                if taken[*img][j] {
                    continue;
                }
                let iou = box_iou(&d.bbox, g);
                if iou >= iou_thresh && best.is_none_or(|(b, _)| iou > b) {
                    best = Some((iou, j));
                }
            }
            match best {
                Some((_, j)) => {
                    taken[*img][j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated average precision.
pub fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<BBox>], iou_thresh: f64) -> Result<PrCurve> {
    check_aligned(dets, gts)?;
    let total = gt_count(gts)? as f64;
    let hits = rank_and_match(dets, gts, iou_thresh);
    let mut points = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        points.push((tp as f64 / total, tp as f64 / (k + 1) as f64));
    }
    // Precision envelope, right to left, then sum over recall steps.
    let mut envelope: Vec<f64> = points.iter().map(|p| p.1).collect();
    for k in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[k] = envelope[k].max(envelope[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(r, _)) in points.iter().enumerate() {
        if r > prev_recall {
            ap += (r - prev_recall) * envelope[k];
            prev_recall = r;
        }
    }
    Ok(PrCurve { points, ap })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SizeBucket {
    pub lo: f64,
    /// `None` for the overflow bucket.
    pub hi: Option<f64>,
    pub hits: usize,
    pub misses: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SizeReport {
    pub buckets: Vec<SizeBucket>,
}

impl SizeReport {
    pub fn total(&self) -> usize {
        self.buckets.iter().map(|b| b.hits + b.misses).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lo,hi,hits,misses\n");
        for b in &self.buckets {
            let hi = b.hi.map_or("inf".to_string(), |h| h.to_string());
            let _ = writeln!(s, "{},{hi},{},{}", b.lo, b.hits, b.misses);
        }
        s
    }
}

/// Buckets each ground truth by its longer side; a hit is any detection with
/// score above `score_thresh` overlapping it at IoU >= 0.5.
pub fn size_bucket_report(
    dets: &[Vec<Detection>],
    gts: &[Vec<BBox>],
    bucket_width: f64,
    max_size: f64,
    score_thresh: f64,
) -> Result<SizeReport> {
    check_aligned(dets, gts)?;
    if !(bucket_width > 0.0) || !(max_size > 0.0) {
        return Err(Error::Validation("bucket width and max size must be positive".into()));
    }
    let n = (max_size / bucket_width).ceil() as usize;
    let mut buckets: Vec<SizeBucket> = (0..n)
        .map(|i| SizeBucket {
            lo: i as f64 * bucket_width,
            hi: Some(((i + 1) as f64 * bucket_width).min(max_size)),
            hits: 0,
            misses: 0,
        })
        .collect();
    buckets.push(SizeBucket { lo: max_size, hi: None, hits: 0, misses: 0 });
    for (ds, gs) in dets.iter().zip(gts) {
        for g in gs {
            let side = g.max_side();
            let idx = if side >= max_size { n } else { ((side / bucket_width).floor() as usize).min(n - 1) };
            let hit = ds.iter().any(|d| d.score > score_thresh && box_iou(&d.bbox, g) >= 0.5);
            if hit {
                buckets[idx].hits += 1;
            } else {
                buckets[idx].misses += 1;
            }
        }
    }
    Ok(SizeReport { buckets })
}

const SVG_W: f64 = 480.0;
const SVG_H: f64 = 320.0;
const MARGIN: f64 = 48.0;

fn svg_frame(title: &str, x_label: &str, y_label: &str, body: &str) -> String {
    let (x0, y0, x1, y1) = (MARGIN, SVG_H - MARGIN, SVG_W - MARGIN / 2.0, MARGIN / 2.0);
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_W}\" height=\"{SVG_H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n\
<text x=\"{}\" y=\"16\" text-anchor=\"middle\">{title}</text>\n\
<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n\
<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{y_label}</text>\n\
{body}</svg>\n",
        SVG_W / 2.0,
        (x0 + x1) / 2.0,
        SVG_H - 12.0,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
    )
}

/// Line plot of `(x, y)` series with both axes spanning the given ranges.
pub fn svg_line_plot(title: &str, x_label: &str, y_label: &str, x_range: (f64, f64), series: &[(&str, Vec<(f64, f64)>)]) -> String {
    let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
    let sx = |x: f64| MARGIN + (x - x_range.0) / (x_range.1 - x_range.0) * (SVG_W - 1.5 * MARGIN);
    let sy = |y: f64| SVG_H - MARGIN - y.clamp(0.0, 1.0) * (SVG_H - 1.5 * MARGIN);
    let mut body = String::new();
    for (k, (name, pts)) in series.iter().enumerate() {
        let c = colors[k % colors.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(body, "<polyline fill=\"none\" stroke=\"{c}\" stroke-width=\"2\" points=\"{}\"/>", path.join(" "));
        let _ = writeln!(body, "<text x=\"{}\" y=\"{}\" fill=\"{c}\">{name}</text>", SVG_W - 140.0, 40.0 + 16.0 * k as f64);
    }
    svg_frame(title, x_label, y_label, &body)
}

pub fn recall_curve_svg(curves: &[(&str, &RecallCurve)]) -> String {
    let series: Vec<(&str, Vec<(f64, f64)>)> = curves
        .iter()
        .map(|(n, c)| (*n, c.thresholds.iter().copied().zip(c.recall.iter().copied()).collect()))
        .collect();
    svg_line_plot("IoU to recall", "IoU threshold", "recall", (0.5, 1.0), &series)
}

pub fn pr_curve_svg(name: &str, curve: &PrCurve) -> String {
    svg_line_plot(&format!("precision-recall (AP {:.4})", curve.ap), "recall", "precision", (0.0, 1.0), &[(name, curve.points.clone())])
}

/// Stacked hit (green) and miss (red) bars per size bucket.
pub fn size_report_svg(report: &SizeReport) -> String {
    let n = report.buckets.len() as f64;
    let max = report.buckets.iter().map(|b| b.hits + b.misses).max().unwrap_or(0).max(1) as f64;
    let bw = (SVG_W - 1.5 * MARGIN) / n;
    let plot_h = SVG_H - 1.5 * MARGIN;
    let mut body = String::new();
    for (i, b) in report.buckets.iter().enumerate() {
        let x = MARGIN + i as f64 * bw + 2.0;
        let hh = b.hits as f64 / max * plot_h;
        let mh = b.misses as f64 / max * plot_h;
        let base = SVG_H - MARGIN;
        let _ = writeln!(body, "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{hh:.1}\" fill=\"#2ca02c\"/>", base - hh, bw - 4.0);
        let _ = writeln!(body, "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{mh:.1}\" fill=\"#d62728\"/>", base - hh - mh, bw - 4.0);
        let label = b.hi.map_or(format!("{}+", b.lo), |h| format!("{}-{}", b.lo, h));
        let _ = writeln!(body, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-size=\"10\">{label}</text>", x + bw / 2.0 - 2.0, base + 14.0);
    }
    svg_frame("hits and misses by size", "max side (px)", "count", &body)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn det(b: BBox, score: f64) -> Detection {
        Detection { bbox: b, score, source_scale: 1.0 }
    }

    #[test]
    fn recall_curve_examples() {
        let gts = vec![vec![bx(0.0, 0.0, 10.0, 10.0), bx(20.0, 20.0, 30.0, 34.0)]];
        let t = default_thresholds();
        assert_eq!(t.len(), 11);
        assert_eq!((t[0], t[10]), (0.5, 1.0));
        let perfect = iou_recall_curve(&gts, &gts, &t).unwrap();
        assert!(perfect.recall.iter().all(|&r| r == 1.0));
        assert_eq!(perfect.auc, 1.0);
        let none = iou_recall_curve(&[vec![]], &gts, &t).unwrap();
        assert!(none.recall.iter().all(|&r| r == 0.0));

        let one = vec![vec![bx(0.0, 0.0, 10.0, 10.0)]];
        let c = iou_recall_curve(&[vec![bx(0.0, 0.0, 6.0, 10.0)]], &one, &t).unwrap();
        assert_eq!(&c.recall[..3], &[1.0, 1.0, 1.0]);
        assert!(c.recall[3..].iter().all(|&r| r == 0.0));
        assert_abs_diff_eq!(c.auc, 3.0 / 11.0, epsilon = 1e-15);
        assert!(c.is_monotone());

        assert!(matches!(iou_recall_curve(&[vec![]], &[vec![]], &t), Err(Error::Degenerate(_))));
    }

    #[test]
    fn ap_examples() {
        let g = bx(0.0, 0.0, 10.0, 10.0);
        let far = bx(50.0, 50.0, 60.0, 60.0);
        let gts = vec![vec![g]];
        assert_eq!(average_precision(&[vec![det(g, 1.0)]], &gts, 0.5).unwrap().ap, 1.0);
        assert_eq!(average_precision(&[vec![det(g, 0.9), det(far, 0.8)]], &gts, 0.5).unwrap().ap, 1.0);
        assert_eq!(average_precision(&[vec![det(g, 0.8), det(far, 0.9)]], &gts, 0.5).unwrap().ap, 0.5);
        let dup = average_precision(&[vec![det(g, 0.9), det(g, 0.8)]], &gts, 0.5).unwrap();
        assert_eq!(dup.points, vec![(1.0, 1.0), (1.0, 0.5)]);
        assert_eq!(average_precision(&[vec![]], &gts, 0.5).unwrap().ap, 0.0);
        assert!(average_precision(&[vec![]], &[vec![]], 0.5).is_err());
    }

    /// Independent AP: recall credit of each true positive times the best
    /// precision at or after its rank, with matching recomputed from scratch.
    fn exhaustive_ap(dets: &[(usize, BBox, f64)], gts: &[Vec<BBox>], t: f64) -> f64 {
        let total: usize = gts.iter().map(Vec::len).sum();
        let mut order: Vec<usize> = (0..dets.len()).collect();
        for i in 1..order.len() {
            let mut j = i;
            while j > 0 && dets[order[j - 1]].2 < dets[order[j]].2 {
                order.swap(j - 1, j);
                j -= 1;
            }
        }
        let mut used = std::collections::HashSet::new();
        let mut tp = Vec::new();
        for &k in &order {
            let (img, b, _) = dets[k];
            let cand = (0..gts[img].len())
                .filter(|j| !used.contains(&(img, *j)))
                .map(|j| (box_iou(&b, &gts[img][j]), j))
                .filter(|(iou, _)| *iou >= t)
                .fold(None::<(f64, usize)>, |a, c| match a {
                    Some(a) if a.0 >= c.0 => Some(a),
                    _ => Some(c),
                });
            tp.push(cand.map(|(_, j)| used.insert((img, j))).is_some());
        }
        let prec: Vec<f64> = (0..tp.len()).map(|k| tp[..=k].iter().filter(|&&x| x).count() as f64 / (k + 1) as f64).collect();
        (0..tp.len())
            .filter(|&k| tp[k])
            .map(|k| prec[k..].iter().cloned().fold(0.0, f64::max) / total as f64)
            .sum()
    }

    #[test]
    fn ap_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..500 {
            let images = rng.random_range(1..3);
            let gts: Vec<Vec<BBox>> = (0..images)
                .map(|_| {
                    (0..rng.random_range(0..3))
                        .map(|_| {
                            let (x, y) = (rng.random_range(0..4) as f64 * 4.0, rng.random_range(0..4) as f64 * 4.0);
                            bx(x, y, x + 8.0, y + 8.0)
                        })
                        .collect()
                })
                .collect();
            if gts.iter().all(Vec::is_empty) {
                continue;
            }
            let flat: Vec<(usize, BBox, f64)> = (0..rng.random_range(0..=6))
                .map(|_| {
                    let (x, y) = (rng.random_range(0..5) as f64 * 3.0, rng.random_range(0..5) as f64 * 3.0);
                    (rng.random_range(0..images), bx(x, y, x + 8.0, y + 8.0), rng.random_range(0..4) as f64 / 4.0)
                })
                .collect();
            let mut per: Vec<Vec<Detection>> = vec![vec![]; images];
            for (i, b, s) in &flat {
                per[*i].push(det(*b, *s));
            }
            // Oracle ranking must see the same tie order: image-major, then list order.
            let mut ordered = Vec::new();
            for (i, ds) in per.iter().enumerate() {
                ordered.extend(ds.iter().map(|d| (i, d.bbox, d.score)));
            }
            let ap = average_precision(&per, &gts, 0.5).unwrap().ap;
            assert_eq!(ap, exhaustive_ap(&ordered, &gts, 0.5), "{ordered:?} vs {gts:?}");
        }
    }

    #[test]
    fn size_report() {
        let gts = vec![vec![bx(0.0, 0.0, 7.0, 5.0), bx(20.0, 20.0, 35.0, 30.0), bx(40.0, 40.0, 100.0, 60.0)]];
        let dets = vec![vec![det(bx(0.0, 0.0, 7.0, 5.0), 0.9), det(bx(20.0, 20.0, 35.0, 30.0), 0.2)]];
        let r = size_bucket_report(&dets, &gts, 10.0, 50.0, 0.5).unwrap();
        assert_eq!(r.buckets.len(), 6);
        assert_eq!((r.buckets[0].hits, r.buckets[0].misses), (1, 0));
        assert_eq!((r.buckets[1].hits, r.buckets[1].misses), (0, 1));
        assert_eq!((r.buckets[5].hits, r.buckets[5].misses, r.buckets[5].hi), (0, 1, None));
        assert_eq!(r.total(), 3);
        let all = size_bucket_report(&gts.iter().map(|g| g.iter().map(|b| det(*b, 1.0)).collect()).collect::<Vec<_>>(), &gts, 10.0, 50.0, 0.5).unwrap();
        assert!(all.buckets.iter().all(|b| b.misses == 0));
        assert!(r.to_csv().starts_with("lo,hi,hits,misses\n0,10,1,0\n"));
    }

    #[test]
    fn svg_output_is_well_formed() {
        let gts = vec![vec![bx(0.0, 0.0, 10.0, 10.0)]];
        let c = iou_recall_curve(&gts, &gts, &default_thresholds()).unwrap();
        let s = recall_curve_svg(&[("a", &c)]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<polyline").count(), 1);
        let r = size_bucket_report(&[vec![]], &gts, 10.0, 50.0, 0.5).unwrap();
        assert_eq!(size_report_svg(&r).matches("<rect").count(), 1 + 2 * 6);
    }
}
