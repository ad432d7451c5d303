use std::sync::Arc;

use crate::diffcore::{Tape, Var};
use crate::error::Result;
use crate::geometry::Point3;

/// Fixed-size neighbourhoods in row layout: group `i` occupies entries
/// `i*k .. (i+1)*k` of `idx`, and `center[i*k + m] = i`.
#[derive(Debug, Clone)]
pub struct Neighbors {
    pub idx: Arc<[usize]>,
    pub center: Arc<[usize]>,
    pub dist: Vec<f64>,
    pub k: usize,
}

impl Neighbors {
    fn from_groups(groups: Vec<Vec<(f64, usize)>>, k: usize) -> Self {
        let mut idx = Vec::with_capacity(groups.len() * k);
        let mut center = Vec::with_capacity(groups.len() * k);
        let mut dist = Vec::with_capacity(groups.len() * k);
        for (i, g) in groups.into_iter().enumerate() {
            debug_assert_eq!(g.len(), k);
            for (d, j) in g {
                idx.push(j);
                center.push(i);
                dist.push(d);
            }
        }
        Self {
            idx: idx.into(),
            center: center.into(),
            dist,
            k,
        }
    }

    pub fn groups(&self) -> usize {
        self.idx.len() / self.k.max(1)
    }

    /// Normalised inverse-distance weights per group.
    pub fn inverse_distance_weights(&self) -> Arc<[f64]> {
        let mut w: Vec<f64> = self.dist.iter().map(|d| 1.0 / (d + 0.1)).collect();
        for g in w.chunks_exact_mut(self.k) {
            let s: f64 = g.iter().sum();
            g.iter_mut().for_each(|x| *x /= s);
        }
        w.into()
    }
}

fn sorted_by_distance(q: &Point3, points: &[Point3]) -> Vec<(f64, usize)> {
    let mut d: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(j, p)| ((p - q).norm(), j))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d
}

/// Ball query within one cloud, one neighbourhood set per `(radius, k)`.
/// Each group starts with the point itself, followed by the nearest others
/// inside the radius; short groups are padded with the nearest found
/// neighbour (the point itself when none was found).
pub fn ball_query(points: &[Point3], scales: &[(f64, usize)]) -> Vec<Neighbors> {
    let sorted: Vec<Vec<(f64, usize)>> = points
        .iter()
        .map(|q| sorted_by_distance(q, points))
        .collect();
    scales
        .iter()
        .map(|&(radius, k)| {
            let groups = sorted
                .iter()
                .enumerate()
                .map(|(i, cands)| {
                    let mut g = vec![(0.0, i)];
                    g.extend(
                        cands
                            .iter()
                            .copied()
                            .filter(|&(d, j)| j != i && d <= radius)
                            .take(k - 1),
                    );
                    let pad = g.get(1).copied().unwrap_or((0.0, i));
                    g.resize(k, pad);
                    g
                })
                .collect();
            Neighbors::from_groups(groups, k)
        })
        .collect()
}

/// `k` nearest `points` of every query, nearest first. `k` is capped at
/// `points.len()`.
pub fn knn(queries: &[Point3], points: &[Point3], k: usize) -> Neighbors {
    let k = k.min(points.len()).max(1);
    let groups = queries
        .iter()
        .map(|q| {
            let mut d = sorted_by_distance(q, points);
            d.truncate(k);
            d
        })
        .collect();
    Neighbors::from_groups(groups, k)
}

/// Weights of one dense layer.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: Var,
    pub b: Var,
}

impl Dense {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.w)?;
        tape.add_bias(y, self.b)
    }

    pub fn apply_relu(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let y = self.apply(tape, x)?;
        Ok(tape.relu(y))
    }
}

/// Applies `layers` with ReLU between them; `relu_last` controls the output.
pub fn mlp(tape: &mut Tape, layers: &[Dense], mut x: Var, relu_last: bool) -> Result<Var> {
    for (i, l) in layers.iter().enumerate() {
        x = if i + 1 < layers.len() || relu_last {
            l.apply_relu(tape, x)?
        } else {
            l.apply(tape, x)?
        };
    }
    Ok(x)
}

/// First layer of a grouped MLP on `(feature_j, p_j - p_i)`, split so the
/// matrix products run once per point rather than once per neighbour:
/// `W_f f_j + W_p (p_j - p_i) + b = A[j] - B[i] + b`.
#[derive(Debug, Clone, Copy)]
pub struct OffsetDense {
    pub w_feat: Var,
    pub w_off: Var,
    pub b: Var,
}

impl OffsetDense {
    pub fn apply(
        &self,
        tape: &mut Tape,
        feats: Var,
        coords: Var,
        centers: Var,
        nb: &Neighbors,
    ) -> Result<Var> {
        let af = tape.matmul(feats, self.w_feat)?;
        let ap = tape.matmul(coords, self.w_off)?;
        let a = tape.add(af, ap)?;
        let b = tape.matmul(centers, self.w_off)?;
        let ga = tape.gather_rows(a, nb.idx.clone())?;
        let gb = tape.gather_rows(b, nb.center.clone())?;
        let h = tape.sub(ga, gb)?;
        let h = tape.add_bias(h, self.b)?;
        Ok(tape.relu(h))
    }
}

/// One scale of a set conv: grouped MLP then max-pool over the group.
#[derive(Debug, Clone)]
pub struct SetConvScale {
    pub first: OffsetDense,
    pub rest: Vec<Dense>,
}

/// Multi-scale set conv without downsampling, followed by a fusion MLP.
/// `coords` is a constant `N x 3` node; `groups` holds one neighbourhood set
/// per scale from [`ball_query`].
pub fn set_conv(
    tape: &mut Tape,
    scales: &[SetConvScale],
    fuse: &Dense,
    groups: &[Neighbors],
    coords: Var,
    feats: Var,
) -> Result<Var> {
    let mut pooled = Vec::with_capacity(scales.len());
    for (s, nb) in scales.iter().zip(groups) {
        let h = s.first.apply(tape, feats, coords, coords, nb)?;
        let h = mlp(tape, &s.rest, h, true)?;
        pooled.push(tape.max_pool(h, nb.k)?);
    }
    let cat = tape.concat_cols(&pooled)?;
    fuse.apply_relu(tape, cat)
}

/// Appends the column-wise max over all points to every row.
pub fn local_global(tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
    let g = tape.max_pool_all(x)?;
    let rows = tape.value(x).rows();
    let bcast = tape.gather_rows(g, vec![0; rows].into())?;
    Ok((tape.concat_cols(&[x, bcast])?, g))
}

/// First cost layer on `(f_src_i, f_tgt_j, p_tgt_j - p_src_i)`, split per cloud.
#[derive(Debug, Clone, Copy)]
pub struct CostFirst {
    pub w_src: Var,
    pub w_tgt: Var,
    pub w_off: Var,
    pub b: Var,
}

#[derive(Debug, Clone)]
pub struct CostVolume {
    pub k: usize,
    pub first: CostFirst,
    pub rest: Vec<Dense>,
}

/// Point-to-patch costs over the `k` nearest target points, then
/// patch-to-patch aggregation over the `k` nearest source points. Both
/// aggregations use normalised inverse-distance weights.
#[allow(clippy::too_many_arguments)]
pub fn cost_volume(
    tape: &mut Tape,
    cv: &CostVolume,
    src_points: &[Point3],
    src_coords: Var,
    src_feats: Var,
    tgt_points: &[Point3],
    tgt_coords: Var,
    tgt_feats: Var,
) -> Result<Var> {
    let nb = knn(src_points, tgt_points, cv.k);
    let f = &cv.first;
    let a_tgt = {
        let x = tape.matmul(tgt_feats, f.w_tgt)?;
        let p = tape.matmul(tgt_coords, f.w_off)?;
        tape.add(x, p)?
    };
    let a_src = {
        let x = tape.matmul(src_feats, f.w_src)?;
        let p = tape.matmul(src_coords, f.w_off)?;
        tape.sub(x, p)?
    };
    let gt = tape.gather_rows(a_tgt, nb.idx.clone())?;
    let gs = tape.gather_rows(a_src, nb.center.clone())?;
    let h = tape.add(gt, gs)?;
    let h = tape.add_bias(h, f.b)?;
    let h = tape.relu(h);
    let cost = mlp(tape, &cv.rest, h, true)?;
    let n = src_points.len();
    let rows: Arc<[usize]> = (0..n * nb.k).collect::<Vec<_>>().into();
    let point_cost = tape.weighted_gather(cost, rows, nb.inverse_distance_weights(), nb.k)?;
    let patch = knn(src_points, src_points, cv.k);
    tape.weighted_gather(
        point_cost,
        patch.idx.clone(),
        patch.inverse_distance_weights(),
        patch.k,
    )
}

/// Standard GRU cell on row vectors.
#[derive(Debug, Clone, Copy)]
pub struct Gru {
    pub wz: Var,
    pub uz: Var,
    pub bz: Var,
    pub wr: Var,
    pub ur: Var,
    pub br: Var,
    pub wn: Var,
    pub un: Var,
    pub bn: Var,
}

impl Gru {
    /// `h' = (1 - z) * n + z * h` with `n = tanh(W_n x + U_n (r * h) + b_n)`.
    pub fn step(&self, tape: &mut Tape, x: Var, h: Var) -> Result<Var> {
        let gate = |tape: &mut Tape, w: Var, u: Var, b: Var, hh: Var| -> Result<Var> {
            let a = tape.matmul(x, w)?;
            let c = tape.matmul(hh, u)?;
            let s = tape.add(a, c)?;
            tape.add_bias(s, b)
        };
        let z = gate(tape, self.wz, self.uz, self.bz, h)?;
        let z = tape.sigmoid(z);
        let r = gate(tape, self.wr, self.ur, self.br, h)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let n = gate(tape, self.wn, self.un, self.bn, rh)?;
        let n = tape.tanh(n);
        let one_minus_z = tape.affine(z, -1.0, 1.0);
        let a = tape.mul(one_minus_z, n)?;
        let b = tape.mul(z, h)?;
        tape.add(a, b)
    }
}
