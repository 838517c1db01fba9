//! Self-contained SVG overlays for planar curves.

use std::fmt::Write as _;

use varembed_core::{DensityModel, DensitySpec, EmbeddingModel};

use crate::config::OutputSection;

const SIZE: f64 = 600.0;
const MARGIN: f64 = 30.0;

/// Maps data coordinates onto the 600×600 canvas with equal axis scales.
#[derive(Clone, Copy, Debug)]
struct Frame {
    scale: f64,
    x_off: f64,
    y_off: f64,
    lo: [f64; 2],
    hi: [f64; 2],
}

impl Frame {
    fn fit(points: &[[f64; 2]]) -> Self {
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        for p in points {
            for k in 0..2 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
        let pad = 0.1 * span;
        let mid = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
        let half = span / 2.0 + pad;
        let lo = [mid[0] - half, mid[1] - half];
        let hi = [mid[0] + half, mid[1] + half];
        let scale = (SIZE - 2.0 * MARGIN) / (2.0 * half);
        Self {
            scale,
            x_off: MARGIN - scale * lo[0],
            y_off: MARGIN + scale * hi[1],
            lo,
            hi,
        }
    }

    fn map(&self, p: [f64; 2]) -> (f64, f64) {
        (self.scale * p[0] + self.x_off, -self.scale * p[1] + self.y_off)
    }
}

fn landmarks(density: &DensityModel) -> (Vec<[f64; 2]>, Vec<[f64; 2]>) {
    // (points to frame, centers to mark)
    match density.spec() {
        DensitySpec::Mixture { centers, variance, .. } => {
            let s = 2.0 * variance.sqrt();
            let mut frame = Vec::new();
            for c in centers {
                frame.push([c[0] - s, c[1] - s]);
                frame.push([c[0] + s, c[1] + s]);
            }
            (frame, centers.iter().map(|c| [c[0], c[1]]).collect())
        }
        DensitySpec::Gaussian { mean, covariance } => {
            let s = [2.0 * covariance[0][0].sqrt(), 2.0 * covariance[1][1].sqrt()];
            (
                vec![[mean[0] - s[0], mean[1] - s[1]], [mean[0] + s[0], mean[1] + s[1]]],
                vec![[mean[0], mean[1]]],
            )
        }
        DensitySpec::SmoothedBall { center, radius, .. } => (
            vec![
                [center[0] - radius, center[1] - radius],
                [center[0] + radius, center[1] + radius],
            ],
            vec![[center[0], center[1]]],
        ),
        DensitySpec::Ring {
            center, radius, width, ..
        } => {
            let r = radius + 2.0 * width;
            (
                vec![[center[0] - r, center[1] - r], [center[0] + r, center[1] + r]],
                vec![[center[0], center[1]]],
            )
        }
    }
}

/// Line segments of the `level` set of a grid sampled on `xs × ys`
/// (values indexed `[iy][ix]`), by marching squares with linear
/// interpolation along cell edges.
fn contour_segments(xs: &[f64], ys: &[f64], values: &[Vec<f64>], level: f64) -> Vec<([f64; 2], [f64; 2])> {
    let mut out = Vec::new();
    let lerp = |a: [f64; 2], va: f64, b: [f64; 2], vb: f64| {
        let t = if (vb - va).abs() > 0.0 {
            (level - va) / (vb - va)
        } else {
            0.5
        };
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    };
    for iy in 0..ys.len() - 1 {
        for ix in 0..xs.len() - 1 {
            // corners counter-clockwise from bottom-left
            let c = [
                [xs[ix], ys[iy]],
                [xs[ix + 1], ys[iy]],
                [xs[ix + 1], ys[iy + 1]],
                [xs[ix], ys[iy + 1]],
            ];
            let v = [
                values[iy][ix],
                values[iy][ix + 1],
                values[iy + 1][ix + 1],
                values[iy + 1][ix],
            ];
            if v.iter().any(|x| !x.is_finite()) {
                continue;
            }
            let mut crossings = Vec::with_capacity(4);
            for e in 0..4 {
                let (a, b) = (e, (e + 1) % 4);
                if (v[a] >= level) != (v[b] >= level) {
                    crossings.push(lerp(c[a], v[a], c[b], v[b]));
                }
            }
            match crossings.len() {
                2 => out.push((crossings[0], crossings[1])),
                4 => {
                    // saddle: resolve with the cell mean
                    let mean = v.iter().sum::<f64>() / 4.0;
                    if (mean >= level) == (v[0] >= level) {
                        out.push((crossings[0], crossings[3]));
                        out.push((crossings[1], crossings[2]));
                    } else {
                        out.push((crossings[0], crossings[1]));
                        out.push((crossings[2], crossings[3]));
                    }
                }
                _ => {}
            }
        }
    }
    out
}

/// Density contours, density landmarks and the fitted curve sampled at
/// `curve_z`.
pub fn render_curve(density: &DensityModel, fitted: &EmbeddingModel, curve_z: &[f64], opts: &OutputSection) -> String {
    let curve: Vec<[f64; 2]> = curve_z
        .iter()
        .map(|z| {
            let x = fitted.eval(&[*z]);
            [x[0], x[1]]
        })
        .collect();
    let (mut frame_pts, centers) = landmarks(density);
    frame_pts.extend(curve.iter().copied().filter(|p| p[0].is_finite() && p[1].is_finite()));
    let frame = Frame::fit(&frame_pts);

    let n = opts.contour_grid;
    let xs: Vec<f64> = (0..n)
        .map(|i| frame.lo[0] + (frame.hi[0] - frame.lo[0]) * i as f64 / (n - 1) as f64)
        .collect();
    let ys: Vec<f64> = (0..n)
        .map(|i| frame.lo[1] + (frame.hi[1] - frame.lo[1]) * i as f64 / (n - 1) as f64)
        .collect();
    let values: Vec<Vec<f64>> = ys
        .iter()
        .map(|y| {
            xs.iter()
                .map(|x| density.log_density(&[*x, *y]).unwrap_or(f64::NEG_INFINITY))
                .collect()
        })
        .collect();
    let peak = values.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 600 600" width="600" height="600">"#
    );
    let _ = writeln!(
        svg,
        "<!-- data-to-canvas transform: u = {:e}*x + {:e}, v = {:e}*y + {:e}; data window x in [{:e}, {:e}], y in [{:e}, {:e}] -->",
        frame.scale, frame.x_off, -frame.scale, frame.y_off, frame.lo[0], frame.hi[0], frame.lo[1], frame.hi[1]
    );
    let _ = writeln!(svg, r#"<rect x="0" y="0" width="600" height="600" fill="white"/>"#);
    let _ = writeln!(svg, r##"<g fill="none" stroke="#8899bb" stroke-width="0.8">"##);
    for k in 0..opts.contour_levels {
        // levels at peak − 1, 2, 4, ... nats
        let level = peak - (1u64 << k) as f64;
        for (a, b) in contour_segments(&xs, &ys, &values, level) {
            let (u0, v0) = frame.map(a);
            let (u1, v1) = frame.map(b);
            let _ = writeln!(svg, r#"<polyline points="{u0:.2},{v0:.2} {u1:.2},{v1:.2}"/>"#);
        }
    }
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(svg, r##"<g fill="#cc3333" stroke="none">"##);
    for c in &centers {
        let (u, v) = frame.map(*c);
        let _ = writeln!(svg, r#"<circle cx="{u:.2}" cy="{v:.2}" r="3"/>"#);
    }
    let _ = writeln!(svg, "</g>");
    let pts: Vec<String> = curve
        .iter()
        .filter(|p| p[0].is_finite() && p[1].is_finite())
        .map(|p| {
            let (u, v) = frame.map(*p);
            format!("{u:.2},{v:.2}")
        })
        .collect();
    let _ = writeln!(
        svg,
        r##"<polyline fill="none" stroke="#111111" stroke-width="2" points="{}"/>"##,
        pts.join(" ")
    );
    let _ = writeln!(svg, "</svg>");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use varembed_core::Matrix;

    #[test]
    fn contour_of_a_cone_is_a_closed_ring_of_segments() {
        let xs: Vec<f64> = (0..41).map(|i| -2.0 + 0.1 * i as f64).collect();
        let ys = xs.clone();
        let values: Vec<Vec<f64>> = ys
            .iter()
            .map(|y| xs.iter().map(|x| -(x * x + y * y).sqrt()).collect())
            .collect();
        let segs = contour_segments(&xs, &ys, &values, -1.0);
        assert!(!segs.is_empty());
        for (a, b) in segs {
            for p in [a, b] {
                assert!(((p[0] * p[0] + p[1] * p[1]).sqrt() - 1.0).abs() < 0.02);
            }
        }
    }

    #[test]
    fn svg_is_self_contained() {
        let p = DensityModel::gaussian(vec![0.0, 0.0], &Matrix::diag(&[4.0, 1.0])).unwrap();
        let e = EmbeddingModel::linear(&Matrix::column(&[2.0, 0.0]), &[0.0, 0.0]).unwrap();
        let zs: Vec<f64> = (0..11).map(|i| -1.0 + 0.2 * i as f64).collect();
        let svg = render_curve(&p, &e, &zs, &OutputSection::default());
        assert!(svg.starts_with("<svg") && svg.contains("viewBox=\"0 0 600 600\""));
        assert!(svg.contains("data-to-canvas transform"));
        assert!(!svg.contains("href"));
        assert!(svg.contains("<circle") && svg.contains("<polyline"));
    }
}
