//! Non-local patch grouping, singular values by Jacobi rotations and the
//! weighted nuclear norm loss on moiré predictions.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::rc::Rc;

/// Thin singular value decomposition of an `m x n` matrix.
///
/// `u` holds `n` left vectors of length `m` back to back, `v` holds `n`
/// right vectors of length `n`. Entry `k` of each pairs with `sigma[k]`.
#[derive(Clone, Debug)]
pub struct ThinSvd {
    pub sigma: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

pub const JACOBI_TOL: f64 = 1e-12;
pub const JACOBI_MAX_SWEEPS: usize = 100;

/// One-sided cyclic Jacobi: rotates column pairs of `M` until they are
/// mutually orthogonal, which diagonalizes `MᵀM` without forming it.
pub fn thin_svd(m: &Tensor) -> Result<ThinSvd> {
    let &[rows, cols] = m.shape() else {
        return Err(Error::dim(format!("svd expects a matrix, got {:?}", m.shape())));
    };
    m.check_finite()?;
    // column-major working copies
    let mut a: Vec<f64> = (0..cols)
        .flat_map(|c| (0..rows).map(move |r| (r, c)))
        .map(|(r, c)| m.data()[r * cols + c])
        .collect();
    let mut v = vec![0.0; cols * cols];
    for k in 0..cols {
        v[k * cols + k] = 1.0;
    }
    let floor = f64::EPSILON * a.iter().map(|x| x * x).sum::<f64>();
    let mut converged = cols < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let (cp, cq) = (&a[p * rows..(p + 1) * rows], &a[q * rows..(q + 1) * rows]);
                let alpha: f64 = cp.iter().map(|x| x * x).sum();
                let beta: f64 = cq.iter().map(|x| x * x).sum();
                let gamma: f64 = cp.iter().zip(cq).map(|(x, y)| x * y).sum();
                if gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() || gamma.abs() <= floor {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, rows, p, q, c, s);
                rotate(&mut v, cols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "Jacobi SVD did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }
    let mut sigma: Vec<f64> = (0..cols)
        .map(|k| a[k * rows..(k + 1) * rows].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
    let mut u = Vec::with_capacity(cols * rows);
    let mut vs = Vec::with_capacity(cols * cols);
    for &k in &order {
        let col = &a[k * rows..(k + 1) * rows];
        if sigma[k] > 0.0 {
            u.extend(col.iter().map(|x| x / sigma[k]));
        } else {
            u.extend(std::iter::repeat(0.0).take(rows));
        }
        vs.extend_from_slice(&v[k * cols..(k + 1) * cols]);
    }
    sigma = order.iter().map(|&k| sigma[k]).collect();
    Ok(ThinSvd { sigma, u, v: vs })
}

fn rotate(a: &mut [f64], len: usize, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..len {
        let x = a[p * len + i];
        let y = a[q * len + i];
        a[p * len + i] = c * x - s * y;
        a[q * len + i] = s * x + c * y;
    }
}

/// Descending singular values of a matrix.
pub fn singular_values(m: &Tensor) -> Result<Vec<f64>> {
    Ok(thin_svd(m)?.sigma)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupingParams {
    pub patch: usize,
    pub stride: usize,
    pub k: usize,
    pub search: usize,
    pub max_groups: usize,
}

impl Default for GroupingParams {
    fn default() -> Self {
        GroupingParams {
            patch: 8,
            stride: 4,
            k: 8,
            search: 16,
            max_groups: 64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WnnmParams {
    pub c_w: f64,
    pub eps: f64,
}

impl Default for WnnmParams {
    fn default() -> Self {
        WnnmParams { c_w: 1.0, eps: 1e-6 }
    }
}

#[derive(Clone, Debug)]
pub struct PatchGroup {
    /// Top-left corners; the reference patch comes first.
    pub coords: Vec<(usize, usize)>,
    /// `patch² · C` rows, one column per patch.
    pub matrix: Tensor,
}

#[derive(Clone, Debug)]
pub struct PatchGroupSet {
    pub patch: usize,
    pub groups: Vec<PatchGroup>,
}

fn check_grouping(h: usize, w: usize, gp: &GroupingParams) -> Result<()> {
    if gp.k < 2 {
        return Err(Error::usage("a patch group needs K >= 2"));
    }
    if gp.patch == 0 || gp.stride == 0 || gp.max_groups == 0 {
        return Err(Error::usage("patch, stride and group cap must be positive"));
    }
    if gp.patch > h || gp.patch > w {
        return Err(Error::dim(format!("{h}x{w} image is smaller than a {0}x{0} patch", gp.patch)));
    }
    Ok(())
}

fn patch_distance(img: &[f64], w: usize, c: usize, p: usize, a: (usize, usize), b: (usize, usize)) -> f64 {
    let mut d = 0.0;
    for dy in 0..p {
        let ra = ((a.0 + dy) * w + a.1) * c;
        let rb = ((b.0 + dy) * w + b.1) * c;
        for i in 0..p * c {
            let e = img[ra + i] - img[rb + i];
            d += e * e;
        }
    }
    d
}

/// Block matching over one `[H, W, C]` image. Each reference on the stride
/// grid keeps itself plus its `K-1` nearest candidates (squared L2, ties
/// broken by row then column) inside the search window.
pub fn group_coords(img: &Tensor, gp: &GroupingParams) -> Result<Vec<Vec<(usize, usize)>>> {
    let &[h, w, c] = img.shape() else {
        return Err(Error::dim(format!("grouping expects [H,W,C], got {:?}", img.shape())));
    };
    check_grouping(h, w, gp)?;
    let p = gp.patch;
    let refs: Vec<(usize, usize)> = (0..=h - p)
        .step_by(gp.stride)
        .flat_map(|y| (0..=w - p).step_by(gp.stride).map(move |x| (y, x)))
        .collect();
    let refs: Vec<(usize, usize)> = if refs.len() > gp.max_groups {
        (0..gp.max_groups).map(|i| refs[i * refs.len() / gp.max_groups]).collect()
    } else {
        refs
    };
    let half = gp.search / 2;
    let data = img.data();
    let mut out = Vec::with_capacity(refs.len());
    for &(ry, rx) in &refs {
        let mut cands = Vec::new();
        for y in ry.saturating_sub(half)..=(ry + half).min(h - p) {
            for x in rx.saturating_sub(half)..=(rx + half).min(w - p) {
                if (y, x) != (ry, rx) {
                    cands.push((patch_distance(data, w, c, p, (ry, rx), (y, x)), y, x));
                }
            }
        }
        if cands.len() + 1 < gp.k {
            return Err(Error::dim(format!(
                "search window around ({ry},{rx}) holds fewer than {} patches",
                gp.k
            )));
        }
        cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut g = vec![(ry, rx)];
        g.extend(cands.iter().take(gp.k - 1).map(|&(_, y, x)| (y, x)));
        out.push(g);
    }
    Ok(out)
}

/// Flat indices into a `[T, H, W, C]` tensor that vectorize the patches of
/// one group, row `(dy*patch + dx)*C + c`, column per patch.
fn group_index_map(dims: (usize, usize, usize), frame: usize, p: usize, coords: &[(usize, usize)]) -> Vec<u32> {
    let (h, w, c) = dims;
    let k = coords.len();
    let mut map = vec![0u32; p * p * c * k];
    for (col, &(y, x)) in coords.iter().enumerate() {
        for dy in 0..p {
            for dx in 0..p {
                for ch in 0..c {
                    let row = (dy * p + dx) * c + ch;
                    let src = ((frame * h + y + dy) * w + x + dx) * c + ch;
                    map[row * k + col] = src as u32;
                }
            }
        }
    }
    map
}

pub fn group_patches(img: &Tensor, gp: &GroupingParams) -> Result<PatchGroupSet> {
    let coords = group_coords(img, gp)?;
    let &[h, w, c] = img.shape() else { unreachable!() };
    let groups = coords
        .into_iter()
        .map(|cs| {
            let map = group_index_map((h, w, c), 0, gp.patch, &cs);
            let data = map.iter().map(|&i| img.data()[i as usize]).collect();
            PatchGroup {
                matrix: Tensor::from_raw(vec![gp.patch * gp.patch * c, cs.len()], data),
                coords: cs,
            }
        })
        .collect();
    Ok(PatchGroupSet {
        patch: gp.patch,
        groups,
    })
}

/// WNNM weights `C_w·sqrt(K)/(σ_i + ε)`.
pub fn wnnm_weights(sigma: &[f64], wp: &WnnmParams) -> Vec<f64> {
    let sk = (sigma.len() as f64).sqrt();
    sigma.iter().map(|s| wp.c_w * sk / (s + wp.eps)).collect()
}

#[derive(Clone, Debug)]
struct PlannedGroup {
    map: Rc<Vec<u32>>,
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
}

/// Frozen grouping and weights for the moiré-prediction loss on chosen
/// frames of a `[T, H, W, C]` prediction. Freezing makes the loss a smooth
/// function of the prediction, which is what gets differentiated.
#[derive(Clone, Debug)]
pub struct MpPlan {
    frames: Vec<Vec<PlannedGroup>>,
    shape: Vec<usize>,
}

impl MpPlan {
    pub fn build(x: &Tensor, frames: &[usize], gp: &GroupingParams, wp: &WnnmParams) -> Result<MpPlan> {
        let &[t, h, w, c] = x.shape() else {
            return Err(Error::dim(format!("moiré loss expects [T,H,W,C], got {:?}", x.shape())));
        };
        if frames.is_empty() || frames.iter().any(|&f| f >= t) {
            return Err(Error::usage(format!("frames {frames:?} invalid for {t} frames")));
        }
        let mut planned = Vec::with_capacity(frames.len());
        for &f in frames {
            let img = x.index_outer(f);
            let coords = group_coords(&img, gp)?;
            let mut groups = Vec::with_capacity(coords.len());
            for cs in coords {
                let map = group_index_map((h, w, c), f, gp.patch, &cs);
                let (rows, cols) = (gp.patch * gp.patch * c, cs.len());
                let m = Tensor::from_raw(
                    vec![rows, cols],
                    map.iter().map(|&i| x.data()[i as usize]).collect(),
                );
                let sigma = singular_values(&m)?;
                groups.push(PlannedGroup {
                    map: Rc::new(map),
                    rows,
                    cols,
                    weights: wnnm_weights(&sigma, wp),
                });
            }
            planned.push(groups);
        }
        Ok(MpPlan {
            frames: planned,
            shape: x.shape().to_vec(),
        })
    }

    pub fn group_count(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    /// Records `mean_frames( Σ_g Σ_i w_i σ_i / G )` on the tape.
    pub fn loss(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if tape.shape(x) != self.shape.as_slice() {
            return Err(Error::dim(format!(
                "plan built for {:?}, got {:?}",
                self.shape,
                tape.shape(x)
            )));
        }
        let mut frame_terms = Vec::with_capacity(self.frames.len());
        for groups in &self.frames {
            let mut terms = Vec::with_capacity(groups.len());
            for g in groups {
                let m = tape.gather(x, g.map.clone(), &[g.rows, g.cols])?;
                let s = tape.singular_values(m)?;
                let w = tape.leaf(Tensor::from_raw(vec![g.cols], g.weights.clone()));
                let ws = tape.mul(s, w)?;
                terms.push(tape.sum(ws));
            }
            let st = tape.stack(&terms)?;
            frame_terms.push(tape.mean(st));
        }
        let ft = tape.stack(&frame_terms)?;
        Ok(tape.mean(ft))
    }
}

/// Value of the moiré-prediction loss with weights taken from the
/// prediction's own singular values.
pub fn mp_loss(x: &Tensor, frames: &[usize], gp: &GroupingParams, wp: &WnnmParams) -> Result<f64> {
    let plan = MpPlan::build(x, frames, gp, wp)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let l = plan.loss(&mut tape, xv)?;
    Ok(tape.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn diagonal_and_rank_one() {
        let d = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 3.0]).unwrap();
        let s = singular_values(&d).unwrap();
        assert!((s[0] - 3.0).abs() < 1e-14 && (s[1] - 1.0).abs() < 1e-14);
        let u = [1.0, 2.0, -1.0, 0.5];
        let v = [0.3, -0.7, 2.0];
        let m = Tensor::from_fn(&[4, 3], |i| u[i[0]] * v[i[1]]);
        let s = singular_values(&m).unwrap();
        let nu: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nv: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((s[0] - nu * nv).abs() < 1e-12);
        assert!(s[1] <= 1e-10 && s[2] <= 1e-10);
    }

    #[test]
    fn factors_reconstruct_the_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Tensor::randn(&[7, 4], &mut rng);
        let svd = thin_svd(&m).unwrap();
        let rec = Tensor::from_fn(&[7, 4], |i| {
            (0..4).map(|k| svd.sigma[k] * svd.u[k * 7 + i[0]] * svd.v[k * 4 + i[1]]).sum()
        });
        assert!(rec.max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn k_of_one_is_rejected() {
        let img = Tensor::zeros(&[8, 8, 1]);
        let gp = GroupingParams { k: 1, ..Default::default() };
        assert!(matches!(group_patches(&img, &gp), Err(Error::Usage(_))));
    }

    #[test]
    fn zero_prediction_has_zero_loss() {
        let x = Tensor::zeros(&[1, 16, 16, 4]);
        let l = mp_loss(&x, &[0], &GroupingParams::default(), &WnnmParams::default()).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn squared_singular_values_sum_to_frobenius_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = Tensor::randn(&[6, 4], &mut rng);
        let s = singular_values(&m).unwrap();
        let fro: f64 = m.data().iter().map(|v| v * v).sum();
        assert!((s.iter().map(|v| v * v).sum::<f64>() - fro).abs() < 1e-10);
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn two_columns_match_the_quadratic_roots() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let m = Tensor::randn(&[6, 2], &mut rng);
        let col = |j: usize| (0..6).map(|i| m.at(&[i, j])).collect::<Vec<f64>>();
        let a: f64 = col(0).iter().map(|v| v * v).sum();
        let d: f64 = col(1).iter().map(|v| v * v).sum();
        let b: f64 = col(0).iter().zip(col(1)).map(|(x, y)| x * y).sum();
        let tr = a + d;
        let disc = ((a - d) * (a - d) + 4.0 * b * b).sqrt();
        let want = [((tr + disc) / 2.0).sqrt(), ((tr - disc) / 2.0).sqrt()];
        let s = singular_values(&m).unwrap();
        assert!((s[0] - want[0]).abs() < 1e-10 && (s[1] - want[1]).abs() < 1e-10);
    }

    fn periodic(h: usize, w: usize, c: usize, period: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tile = Tensor::randn(&[period, period, c], &mut rng);
        let norm = tile.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        Tensor::from_fn(&[h, w, c], |i| tile.at(&[i[0] % period, i[1] % period, i[2]]) / norm)
    }

    fn periodic_grouping() -> GroupingParams {
        GroupingParams {
            patch: 4,
            stride: 4,
            k: 4,
            search: 8,
            max_groups: 64,
        }
    }

    #[test]
    fn period_equal_to_stride_gives_identical_patches() {
        let img = periodic(12, 12, 2, 4, 13);
        let set = group_patches(&img, &periodic_grouping()).unwrap();
        assert_eq!(set.groups.len(), 9);
        for g in &set.groups {
            let (rows, k) = (g.matrix.shape()[0], g.matrix.shape()[1]);
            for r in 0..rows {
                let first = g.matrix.at(&[r, 0]);
                assert!((1..k).all(|j| g.matrix.at(&[r, j]) == first));
            }
        }
    }

    #[test]
    fn rank_one_groups_score_root_k() {
        let img = periodic(12, 12, 2, 4, 14);
        let x = Tensor::stack(&[img]).unwrap();
        let l = mp_loss(&x, &[0], &periodic_grouping(), &WnnmParams::default()).unwrap();
        assert!((l - 2.0).abs() < 1e-5, "{l}");
    }

    #[test]
    fn grouping_matches_brute_force_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let img = Tensor::randn(&[8, 8, 2], &mut rng);
        let gp = GroupingParams {
            patch: 3,
            stride: 2,
            k: 5,
            search: 4,
            max_groups: 64,
        };
        let got = group_coords(&img, &gp).unwrap();
        let patch = |y: usize, x: usize| -> Vec<f64> {
            let mut v = Vec::new();
            for dy in 0..3 {
                for dx in 0..3 {
                    for c in 0..2 {
                        v.push(img.at(&[y + dy, x + dx, c]));
                    }
                }
            }
            v
        };
        let mut refs = Vec::new();
        for y in (0..=5).step_by(2) {
            for x in (0..=5).step_by(2) {
                refs.push((y, x));
            }
        }
        assert_eq!(got.len(), refs.len());
        for (g, &(ry, rx)) in got.iter().zip(&refs) {
            let pr = patch(ry, rx);
            let mut all: Vec<(f64, usize, usize)> = Vec::new();
            for y in 0..=5usize {
                for x in 0..=5usize {
                    if y.abs_diff(ry) <= 2 && x.abs_diff(rx) <= 2 && (y, x) != (ry, rx) {
                        let d = pr.iter().zip(patch(y, x)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                        all.push((d, y, x));
                    }
                }
            }
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            assert_eq!(g[0], (ry, rx));
            let want: Vec<(usize, usize)> = all[..4].iter().map(|&(_, y, x)| (y, x)).collect();
            assert_eq!(&g[1..], want.as_slice());
        }
    }
}
