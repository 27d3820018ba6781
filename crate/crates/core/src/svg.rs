//! Level-set figures as plain SVG: a two-colour fill by side of the level,
//! the marching-squares contour, and optional labelled points.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::Vec64;
use crate::topology::GridDomain;

const SUB_FILL: &str = "#c6dbef";
const SUPER_FILL: &str = "#fdd0a2";
const SUB_POINT: &str = "#2171b5";
const SUPER_POINT: &str = "#e6550d";

pub type Segment = ([f64; 2], [f64; 2]);

fn lerp(p: [f64; 2], q: [f64; 2], fp: f64, fq: f64, c: f64) -> [f64; 2] {
    let t = if fq == fp { 0.5 } else { ((c - fp) / (fq - fp)).clamp(0.0, 1.0) };
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Marching-squares segments of `{f = c}` on a 2-D lattice, in domain coordinates.
/// Saddle cells are resolved by the cell-centre average.
pub fn contour_segments(field: &[f64], g: &GridDomain, c: f64) -> Result<Vec<Segment>> {
    if g.dim() != 2 || field.len() != g.len() {
        return Err(Error::Dimension("contours need a 2-D grid and a matching field".into()));
    }
    let (nx, ny) = (g.resolution[0], g.resolution[1]);
    let mut segs = Vec::new();
    for iy in 0..ny - 1 {
        for ix in 0..nx - 1 {
            // Corners counter-clockwise from the lower left.
            let idx = [ix + nx * iy, ix + 1 + nx * iy, ix + 1 + nx * (iy + 1), ix + nx * (iy + 1)];
            let pts = [
                [g.coord(0, ix), g.coord(1, iy)],
                [g.coord(0, ix + 1), g.coord(1, iy)],
                [g.coord(0, ix + 1), g.coord(1, iy + 1)],
                [g.coord(0, ix), g.coord(1, iy + 1)],
            ];
            let v = idx.map(|i| field[i]);
            let code = v.iter().enumerate().fold(0u8, |acc, (k, &f)| acc | (u8::from(f > c) << k));
            if code == 0 || code == 15 {
                continue;
            }
            let edge = |k: usize| {
                let j = (k + 1) % 4;
                lerp(pts[k], pts[j], v[k], v[j], c)
            };
            // Edge k joins corner k and k+1.
            let pairs: &[(usize, usize)] = match code {
                1 | 14 => &[(3, 0)],
                2 | 13 => &[(0, 1)],
                3 | 12 => &[(3, 1)],
                4 | 11 => &[(1, 2)],
                6 | 9 => &[(0, 2)],
                7 | 8 => &[(2, 3)],
                5 | 10 => {
                    let centre_above = v.iter().sum::<f64>() / 4.0 > c;
                    if (code == 5) == centre_above {
                        &[(0, 1), (2, 3)]
                    } else {
                        &[(3, 0), (1, 2)]
                    }
                }
                _ => unreachable!("4-bit code"),
            };
            for &(a, b) in pairs {
                segs.push((edge(a), edge(b)));
            }
        }
    }
    Ok(segs)
}

/// Labelled points to draw over the fill.
pub struct Overlay<'a> {
    pub points: &'a [Vec64],
    pub labels: &'a [bool],
}

/// SVG document for the level `c` of `field`, `size` pixels square. No timestamps
/// are embedded, so equal inputs give equal bytes.
pub fn render_level_set(field: &[f64], g: &GridDomain, c: f64, overlay: Option<Overlay>, title: &str, size: f64) -> Result<String> {
    let segs = contour_segments(field, g, c)?;
    let (nx, ny) = (g.resolution[0], g.resolution[1]);
    let (x0, x1, y0, y1) = (g.lo[0], g.hi[0], g.lo[1], g.hi[1]);
    let sx = |x: f64| (x - x0) / (x1 - x0) * size;
    let sy = |y: f64| (y1 - y) / (y1 - y0) * size;
    let (cw, ch) = (size / nx as f64, size / ny as f64);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{}" viewBox="0 0 {size} {}">"#, size + 24.0, size + 24.0);
    let _ = writeln!(s, r#"<title>{}</title>"#, escape(title));
    let _ = writeln!(s, r#"<g shape-rendering="crispEdges">"#);
    for iy in 0..ny {
        let top = size - (iy + 1) as f64 * ch;
        let mut ix = 0;
        while ix < nx {
            let above = field[ix + nx * iy] > c;
            let start = ix;
            while ix < nx && (field[ix + nx * iy] > c) == above {
                ix += 1;
            }
            let fill = if above { SUPER_FILL } else { SUB_FILL };
            let _ = writeln!(
                s,
                r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{fill}"/>"#,
                start as f64 * cw,
                top,
                (ix - start) as f64 * cw,
                ch
            );
        }
    }
    let _ = writeln!(s, "</g>");
    if !segs.is_empty() {
        let mut d = String::new();
        for (a, b) in &segs {
            let _ = write!(d, "M{:.3} {:.3}L{:.3} {:.3}", sx(a[0]), sy(a[1]), sx(b[0]), sy(b[1]));
        }
        let _ = writeln!(s, r#"<path d="{d}" fill="none" stroke="black" stroke-width="1.5"/>"#);
    }
    if let Some(o) = overlay {
        for (p, &l) in o.points.iter().zip(o.labels) {
            let colour = if l { SUPER_POINT } else { SUB_POINT };
            let _ = writeln!(s, r#"<circle cx="{:.3}" cy="{:.3}" r="2" fill="{colour}"/>"#, sx(p[0]), sy(p[1]));
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="4" y="{:.1}" font-family="sans-serif" font-size="13">{} (c = {c:.4})</text>"#,
        size + 17.0,
        escape(title)
    );
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
