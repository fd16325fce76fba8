//! Dense compute kernels.
//!
//! Every output element is produced by exactly one task with a fixed
//! summation order, and cross-task reductions are combined in chunk order,
//! so results are bitwise independent of the rayon thread count. Row
//! results also never depend on which other rows share the matrix, which
//! keeps pointwise layers exactly equivariant under row permutations.

use rayon::prelude::*;

use crate::nn::tensor::Scalar;

/// Rows handed to one rayon task.
const ROW_CHUNK: usize = 32;
/// Depth of the `k` blocking in `matmul`, chosen so a block of `b` stays in cache.
const K_BLOCK: usize = 64;

#[inline]
pub fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y += Σ_i coeffs[i] · rows[i]` where `rows` stacks `coeffs.len()` rows
/// of `y.len()` entries. Zero coefficients are skipped. Four rows are
/// fused per pass over `y`; each entry still receives its terms in index
/// order, so the result equals a sequence of `axpy` calls bit for bit.
#[inline]
pub fn accumulate_rows<S: Scalar>(coeffs: &[S], rows: &[S], y: &mut [S]) {
    let m = y.len();
    let mut idx = [0usize; 4];
    let mut n = 0;
    for (i, &c) in coeffs.iter().enumerate() {
        if c == S::zero() {
            continue;
        }
        idx[n] = i;
        n += 1;
        if n == 4 {
            let [i0, i1, i2, i3] = idx;
            let (c0, c1, c2, c3) = (coeffs[i0], coeffs[i1], coeffs[i2], coeffs[i3]);
            let (r0, r1) = (&rows[i0 * m..][..m], &rows[i1 * m..][..m]);
            let (r2, r3) = (&rows[i2 * m..][..m], &rows[i3 * m..][..m]);
            for j in 0..m {
                let mut v = y[j];
                v += c0 * r0[j];
                v += c1 * r1[j];
                v += c2 * r2[j];
                v += c3 * r3[j];
                y[j] = v;
            }
            n = 0;
        }
    }
    for &i in &idx[..n] {
        axpy(coeffs[i], &rows[i * m..][..m], y);
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed order.
#[inline]
pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (ca, cb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = S::zero();
    for j in chunks * 8..a.len() {
        tail += a[j] * b[j];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

pub fn transpose<S: Scalar>(a: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `a[n×k] · b[k×m]`.
pub fn matmul<S: Scalar>(a: &[S], b: &[S], n: usize, k: usize, m: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    let mut out = vec![S::zero(); n * m];
    if m == 0 {
        return out;
    }
    out.par_chunks_mut(ROW_CHUNK * m)
        .enumerate()
        .for_each(|(chunk, block)| {
            let row0 = chunk * ROW_CHUNK;
            let rows = block.len() / m;
            for kb in (0..k).step_by(K_BLOCK) {
                let ke = (kb + K_BLOCK).min(k);
                for r in 0..rows {
                    let arow = &a[(row0 + r) * k..(row0 + r + 1) * k];
                    accumulate_rows(&arow[kb..ke], &b[kb * m..ke * m], &mut block[r * m..(r + 1) * m]);
                }
            }
        });
    out
}

/// `g[n×m] · b[k×m]ᵀ`, i.e. the input gradient of `x · b`.
pub fn matmul_bt<S: Scalar>(g: &[S], b: &[S], n: usize, m: usize, k: usize) -> Vec<S> {
    let bt = transpose(b, k, m);
    matmul(g, &bt, n, m, k)
}

/// `a[n×k]ᵀ · g[n×m]`, i.e. the weight gradient of `a · w`.
pub fn matmul_at<S: Scalar>(a: &[S], g: &[S], n: usize, k: usize, m: usize) -> Vec<S> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(g.len(), n * m);
    let mut out = vec![S::zero(); k * m];
    if m == 0 {
        return out;
    }
    // Each task owns a band of output rows and scans all n input rows in order.
    let band = (16 * 1024 / m.max(1)).clamp(1, 256);
    out.par_chunks_mut(band * m)
        .enumerate()
        .for_each(|(chunk, block)| {
            let k0 = chunk * band;
            let rows = block.len() / m;
            let mut coeffs = [S::zero(); 4];
            for i0 in (0..n).step_by(4) {
                let i1 = (i0 + 4).min(n);
                let grows = &g[i0 * m..i1 * m];
                for r in 0..rows {
                    for (c, i) in coeffs.iter_mut().zip(i0..i1) {
                        *c = a[i * k + k0 + r];
                    }
                    accumulate_rows(&coeffs[..i1 - i0], grows, &mut block[r * m..(r + 1) * m]);
                }
            }
        });
    out
}

/// Column sums of an `n×m` matrix.
pub fn column_sums<S: Scalar>(g: &[S], n: usize, m: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m];
    for i in 0..n {
        axpy(S::one(), &g[i * m..(i + 1) * m], &mut out);
    }
    out
}

/// Neighbor offsets of a 3×3×3 stencil, tap-major order `(dx, dy, dz)`.
pub fn stencil_taps() -> [(i64, i64, i64); 27] {
    let mut taps = [(0, 0, 0); 27];
    let mut t = 0;
    for dx in -1..=1 {
        for dy in -1..=1 {
            for dz in -1..=1 {
                taps[t] = (dx, dy, dz);
                t += 1;
            }
        }
    }
    taps
}

/// Index of the voxel at `(x, y, z)` within one `res³` grid.
#[inline]
pub fn voxel_index(res: usize, x: usize, y: usize, z: usize) -> usize {
    (x * res + y) * res + z
}

/// For every voxel of a grid, the neighbor reached through each tap
/// (`None` when the tap falls outside the grid).
fn neighbor_table(res: usize) -> Vec<[Option<u32>; 27]> {
    let taps = stencil_taps();
    let r = res as i64;
    let mut table = vec![[None; 27]; res * res * res];
    for x in 0..r {
        for y in 0..r {
            for z in 0..r {
                let v = voxel_index(res, x as usize, y as usize, z as usize);
                for (t, &(dx, dy, dz)) in taps.iter().enumerate() {
                    let (nx, ny, nz) = (x + dx, y + dy, z + dz);
                    if (0..r).contains(&nx) && (0..r).contains(&ny) && (0..r).contains(&nz) {
                        table[v][t] = Some(voxel_index(res, nx as usize, ny as usize, nz as usize) as u32);
                    }
                }
            }
        }
    }
    table
}

/// Geometry of a batched dense 3×3×3 convolution with stride 1 and zero
/// padding 1 over `batch` grids of `res³` voxels stored as rows.
#[derive(Clone, Debug)]
pub struct Conv3dShape {
    pub batch: usize,
    pub res: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv3dShape {
    pub fn voxels(&self) -> usize {
        self.res * self.res * self.res
    }

    pub fn rows(&self) -> usize {
        self.batch * self.voxels()
    }
}

/// Forward pass. `w` is `[27, cin, cout]`, `bias` is `[cout]`.
pub fn conv3d_forward<S: Scalar>(x: &[S], w: &[S], bias: Option<&[S]>, shape: &Conv3dShape) -> Vec<S> {
    let (cin, cout, vox) = (shape.cin, shape.cout, shape.voxels());
    let table = neighbor_table(shape.res);
    let mut out = vec![S::zero(); shape.rows() * cout];
    out.par_chunks_mut(ROW_CHUNK * cout)
        .enumerate()
        .for_each(|(chunk, block)| {
            let row0 = chunk * ROW_CHUNK;
            for (r, orow) in block.chunks_mut(cout).enumerate() {
                let row = row0 + r;
                let (b, v) = (row / vox, row % vox);
                if let Some(bias) = bias {
                    orow.copy_from_slice(bias);
                }
                for (t, nb) in table[v].iter().enumerate() {
                    let Some(nb) = nb else { continue };
                    let xi = &x[(b * vox + *nb as usize) * cin..][..cin];
                    accumulate_rows(xi, &w[t * cin * cout..][..cin * cout], orow);
                }
            }
        });
    out
}

/// Weight gradient `[27, cin, cout]` of `conv3d_forward`.
pub fn conv3d_grad_weight<S: Scalar>(x: &[S], g: &[S], shape: &Conv3dShape) -> Vec<S> {
    const VOXEL_CHUNK: usize = 4096;
    let (cin, cout, vox) = (shape.cin, shape.cout, shape.voxels());
    let table = neighbor_table(shape.res);
    let rows = shape.rows();
    let partials: Vec<Vec<S>> = (0..rows.div_ceil(VOXEL_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut acc = vec![S::zero(); 27 * cin * cout];
            for row in chunk * VOXEL_CHUNK..((chunk + 1) * VOXEL_CHUNK).min(rows) {
                let (b, v) = (row / vox, row % vox);
                let grow = &g[row * cout..][..cout];
                if grow.iter().all(|&q| q == S::zero()) {
                    continue;
                }
                for (t, nb) in table[v].iter().enumerate() {
                    let Some(nb) = nb else { continue };
                    let xi = &x[(b * vox + *nb as usize) * cin..][..cin];
                    for (ci, &a) in xi.iter().enumerate() {
                        if a != S::zero() {
                            axpy(a, grow, &mut acc[(t * cin + ci) * cout..][..cout]);
                        }
                    }
                }
            }
            acc
        })
        .collect();
    let mut out = vec![S::zero(); 27 * cin * cout];
    for p in &partials {
        axpy(S::one(), p, &mut out);
    }
    out
}

/// Input gradient of `conv3d_forward`. Rows with `active[row] == false` are
/// left at zero; callers use this when those rows have no upstream
/// dependency (empty voxels of a voxelized grid).
pub fn conv3d_grad_input<S: Scalar>(g: &[S], w: &[S], shape: &Conv3dShape, active: Option<&[bool]>) -> Vec<S> {
    let (cin, cout, vox) = (shape.cin, shape.cout, shape.voxels());
    let table = neighbor_table(shape.res);
    let taps = stencil_taps();
    // Tap t read voxel v + offset_t; the mirrored tap leads back from v to
    // every output that read it.
    let mirror: Vec<usize> = taps
        .iter()
        .map(|&(dx, dy, dz)| taps.iter().position(|&o| o == (-dx, -dy, -dz)).unwrap())
        .collect();
    // [27, cout, cin] so the inner loop is an axpy over cin.
    let mut wt = vec![S::zero(); w.len()];
    for t in 0..27 {
        let tw = transpose(&w[t * cin * cout..(t + 1) * cin * cout], cin, cout);
        wt[t * cin * cout..(t + 1) * cin * cout].copy_from_slice(&tw);
    }
    let mut dx = vec![S::zero(); shape.rows() * cin];
    dx.par_chunks_mut(ROW_CHUNK * cin)
        .enumerate()
        .for_each(|(chunk, block)| {
            let row0 = chunk * ROW_CHUNK;
            for (r, drow) in block.chunks_mut(cin).enumerate() {
                let row = row0 + r;
                if active.is_some_and(|a| !a[row]) {
                    continue;
                }
                let (b, v) = (row / vox, row % vox);
                for t in 0..27 {
                    // Output voxel o with o + offset_t == v.
                    let Some(o) = table[v][mirror[t]] else { continue };
                    let grow = &g[(b * vox + o as usize) * cout..][..cout];
                    accumulate_rows(grow, &wt[t * cout * cin..][..cout * cin], drow);
                }
            }
        });
    dx
}
