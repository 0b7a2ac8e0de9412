//! Triangle-mesh helpers: icospheres, area-weighted vertex normals and
//! rasterizing per-vertex normals into a UV normal map.

use std::collections::HashMap;

use crate::error::{invalid, mismatch, Result};
use crate::shading::{normalize_backward, unit_normal, Vec3};
use crate::texture::{TextureMap, UvMask};

pub type Face = [u32; 3];

#[inline]
fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Unit icosphere after `level` rounds of 4-way subdivision. Faces wind
/// counter-clockwise seen from outside.
pub fn icosphere(level: usize) -> (Vec<Vec3>, Vec<Face>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .into_iter()
    .map(|v| unit_normal(v).0)
    .collect();
    let mut faces: Vec<Face> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut mid: HashMap<(u32, u32), u32> = HashMap::new();
        let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *mid.entry(key).or_insert_with(|| {
                let (pa, pb) = (verts[a as usize], verts[b as usize]);
                verts.push(unit_normal([pa[0] + pb[0], pa[1] + pb[1], pa[2] + pb[2]]).0);
                (verts.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (verts, faces)
}

fn check_topology(n_verts: usize, faces: &[Face]) -> Result<()> {
    for (i, f) in faces.iter().enumerate() {
        if f.iter().any(|&v| v as usize >= n_verts) {
            return Err(invalid(format!("face {i} references a vertex >= {n_verts}")));
        }
    }
    Ok(())
}

fn face_normal(positions: &[Vec3], f: &Face) -> Vec3 {
    let a = positions[f[0] as usize];
    cross(
        sub(positions[f[1] as usize], a),
        sub(positions[f[2] as usize], a),
    )
}

fn accumulated(positions: &[Vec3], faces: &[Face]) -> Vec<Vec3> {
    let mut acc = vec![[0.0; 3]; positions.len()];
    for f in faces {
        let n = face_normal(positions, f);
        for &v in f {
            let a = &mut acc[v as usize];
            a[0] += n[0];
            a[1] += n[1];
            a[2] += n[2];
        }
    }
    acc
}

/// Area-weighted vertex normals. Vertices with no (or cancelling) incident
/// area get `(0, 0, 1)`.
pub fn vertex_normals(positions: &[Vec3], faces: &[Face]) -> Result<Vec<Vec3>> {
    check_topology(positions.len(), faces)?;
    Ok(accumulated(positions, faces)
        .into_iter()
        .map(|m| unit_normal(m).0)
        .collect())
}

/// Pulls a gradient on the vertex normals back onto the positions.
pub fn vertex_normals_backward(
    positions: &[Vec3],
    faces: &[Face],
    grad_normals: &[Vec3],
) -> Result<Vec<Vec3>> {
    check_topology(positions.len(), faces)?;
    if grad_normals.len() != positions.len() {
        return Err(mismatch("vertex normal gradient length"));
    }
    let grad_m: Vec<Vec3> = accumulated(positions, faces)
        .into_iter()
        .zip(grad_normals)
        .map(|(m, g)| {
            let (n, len) = unit_normal(m);
            normalize_backward(n, len, *g)
        })
        .collect();
    let mut grad_p = vec![[0.0; 3]; positions.len()];
    for f in faces {
        let [a, b, c] = f.map(|v| v as usize);
        let g = [0, 1, 2].map(|k| grad_m[a][k] + grad_m[b][k] + grad_m[c][k]);
        let e1 = sub(positions[b], positions[a]);
        let e2 = sub(positions[c], positions[a]);
        // n = e1 × e2, so ∂(n·g)/∂e1 = e2 × g and ∂(n·g)/∂e2 = g × e1.
        let g1 = cross(e2, g);
        let g2 = cross(g, e1);
        for k in 0..3 {
            grad_p[b][k] += g1[k];
            grad_p[c][k] += g2[k];
            grad_p[a][k] -= g1[k] + g2[k];
        }
    }
    Ok(grad_p)
}

/// Which triangle covers each texel of a UV chart, with barycentric weights.
/// UVs are fixed per model, so the raster can be reused while geometry moves.
#[derive(Debug, Clone, PartialEq)]
pub struct UvRaster {
    width: usize,
    height: usize,
    texels: Vec<Option<(usize, [f64; 3])>>,
}

impl UvRaster {
    /// Texel `(x, y)` samples `uv = ((x + 0.5) / w, (y + 0.5) / h)`. Zero-area
    /// triangles are skipped; where triangles overlap the lowest index wins.
    pub fn build(uv: &[[f64; 2]], faces: &[Face], width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid("raster resolution must be nonzero"));
        }
        check_topology(uv.len(), faces)?;
        if uv.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("uv coordinates must lie in [0,1]"));
        }
        let mut texels = vec![None; width * height];
        for (fi, f) in faces.iter().enumerate() {
            let [a, b, c] = f.map(|v| uv[v as usize]);
            let area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
            if area.abs() < 1e-14 {
                continue;
            }
            let lo = |i: usize| a[i].min(b[i]).min(c[i]);
            let hi = |i: usize| a[i].max(b[i]).max(c[i]);
            let x0 = ((lo(0) * width as f64 - 0.5).floor().max(0.0)) as usize;
            let x1 = ((hi(0) * width as f64 - 0.5).ceil() as usize).min(width - 1);
            let y0 = ((lo(1) * height as f64 - 0.5).floor().max(0.0)) as usize;
            let y1 = ((hi(1) * height as f64 - 0.5).ceil() as usize).min(height - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let slot = &mut texels[y * width + x];
                    if slot.is_some() {
                        continue;
                    }
                    let p = [(x as f64 + 0.5) / width as f64, (y as f64 + 0.5) / height as f64];
                    let wb = ((p[0] - a[0]) * (c[1] - a[1]) - (p[1] - a[1]) * (c[0] - a[0])) / area;
                    let wc = ((b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])) / area;
                    let wa = 1.0 - wb - wc;
                    const EPS: f64 = -1e-9;
                    if wa >= EPS && wb >= EPS && wc >= EPS {
                        *slot = Some((fi, [wa, wb, wc]));
                    }
                }
            }
        }
        Ok(UvRaster {
            width,
            height,
            texels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn texel(&self, p: usize) -> Option<(usize, [f64; 3])> {
        self.texels[p]
    }

    pub fn coverage(&self) -> UvMask {
        UvMask::from_fn(self.width, self.height, |x, y| {
            self.texels[y * self.width + x].is_some()
        })
    }

    /// Interpolates vertex normals into a unit-length normal map. Uncovered
    /// texels hold `(0, 0, 1)`.
    pub fn interpolate_normals(&self, faces: &[Face], normals: &[Vec3]) -> TextureMap {
        let mut data = Vec::with_capacity(self.texels.len() * 3);
        for t in &self.texels {
            let n = match t {
                Some((fi, w)) => {
                    let f = faces[*fi];
                    let mut u = [0.0; 3];
                    for k in 0..3 {
                        let nv = normals[f[k] as usize];
                        for d in 0..3 {
                            u[d] += w[k] * nv[d];
                        }
                    }
                    unit_normal(u).0
                }
                None => [0.0, 0.0, 1.0],
            };
            data.extend_from_slice(&n);
        }
        TextureMap::from_raw(self.width, self.height, 3, data)
    }

    /// Pulls a gradient on the normal map back onto the vertex normals.
    pub fn interpolate_normals_backward(
        &self,
        faces: &[Face],
        normals: &[Vec3],
        grad_map: &[f64],
    ) -> Vec<Vec3> {
        let mut grad = vec![[0.0; 3]; normals.len()];
        for (p, t) in self.texels.iter().enumerate() {
            let Some((fi, w)) = t else { continue };
            let f = faces[*fi];
            let mut u = [0.0; 3];
            for k in 0..3 {
                let nv = normals[f[k] as usize];
                for d in 0..3 {
                    u[d] += w[k] * nv[d];
                }
            }
            let (n, len) = unit_normal(u);
            let g = [grad_map[p * 3], grad_map[p * 3 + 1], grad_map[p * 3 + 2]];
            let gu = normalize_backward(n, len, g);
            for k in 0..3 {
                let gv = &mut grad[f[k] as usize];
                for d in 0..3 {
                    gv[d] += w[k] * gu[d];
                }
            }
        }
        grad
    }
}

/// Vertex normals of the mesh rasterized into UV space, plus the coverage
/// mask (uncovered texels hold `(0, 0, 1)` and weight 0).
pub fn rasterize_normals_to_uv(
    positions: &[Vec3],
    faces: &[Face],
    uv: &[[f64; 2]],
    width: usize,
    height: usize,
) -> Result<(TextureMap, UvMask)> {
    if uv.len() != positions.len() {
        return Err(mismatch("one uv per vertex required"));
    }
    let normals = vertex_normals(positions, faces)?;
    let raster = UvRaster::build(uv, faces, width, height)?;
    Ok((raster.interpolate_normals(faces, &normals), raster.coverage()))
}
