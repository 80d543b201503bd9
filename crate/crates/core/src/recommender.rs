//! Matrix-factorization content assignment.
//!
//! Users and posts are embedded with a truncated SVD of the engagement
//! matrix. A user's feed draws posts with probability proportional to the
//! (shifted) cross product of the two embeddings. Treated users instead get
//! a fresh embedding drawn each day from a small ball around the average
//! control user, which flattens how personalized their feed is.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, Exp1, Poisson, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::stats;

/// Users × posts engagement counts or ratings.
#[derive(Debug, Clone, PartialEq)]
pub struct EngagementMatrix {
    entries: DMatrix<f64>,
}

impl EngagementMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::Dimension("engagement matrix must be at least 1x1".into()));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::DataContract("engagement matrix has non-finite entries".into()));
        }
        Ok(Self { entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn n_users(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_posts(&self) -> usize {
        self.entries.ncols()
    }

    /// Column sums: total engagement each post received.
    pub fn post_totals(&self, users: impl IntoIterator<Item = usize>) -> Vec<f64> {
        let mut totals = vec![0.0; self.n_posts()];
        for i in users {
            for (j, t) in totals.iter_mut().enumerate() {
                *t += self.entries[(i, j)];
            }
        }
        totals
    }

    /// CSV with header `post_0..post_{n-1}` and one row per user.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let header: Vec<String> = (0..self.n_posts()).map(|j| format!("post_{j}")).collect();
        out.write_record(&header).map_err(csv_err)?;
        for i in 0..self.n_users() {
            let row: Vec<String> = self.entries.row(i).iter().map(|v| v.to_string()).collect();
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut input = csv::Reader::from_reader(r);
        let header = input.headers().map_err(csv_err)?.clone();
        for (j, h) in header.iter().enumerate() {
            if h != format!("post_{j}") {
                return Err(Error::DataContract(format!("column {j} is `{h}`, expected post_{j}")));
            }
        }
        let mut rows = Vec::new();
        for rec in input.records() {
            let rec = rec.map_err(csv_err)?;
            let row = rec
                .iter()
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::DataContract(format!("bad matrix entry `{f}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::from_rows(&rows)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::DataContract(format!("{other:?}")),
    }
}

/// Truncated SVD `U·diag(Σ)·Vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Factorization {
    /// users × k
    pub user_factors: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    /// posts × k
    pub post_factors: DMatrix<f64>,
    /// Smallest entry of the rank-k reconstruction. Scores are shifted by this
    /// so that every in-sample score is non-negative.
    pub score_floor: f64,
}

impl Factorization {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.user_factors * DMatrix::from_diagonal(&self.singular_values) * self.post_factors.transpose()
    }

    pub fn user_embedding(&self, user: usize) -> Vec<f64> {
        self.user_factors.row(user).iter().copied().collect()
    }

    /// Raw cross-product scores `u·diag(Σ)·Vᵀ`.
    pub fn scores(&self, user_emb: &[f64]) -> Result<Vec<f64>> {
        if user_emb.len() != self.rank() {
            return Err(Error::Dimension(format!(
                "embedding has {} dims, factorization rank is {}",
                user_emb.len(),
                self.rank()
            )));
        }
        Ok((0..self.post_factors.nrows())
            .map(|j| {
                (0..self.rank())
                    .map(|d| user_emb[d] * self.singular_values[d] * self.post_factors[(j, d)])
                    .sum()
            })
            .collect())
    }
}

/// Rank-`k` SVD with singular values in decreasing order. Each left singular
/// vector is signed so that its first non-negligible entry is positive; the
/// matching right vector is flipped with it.
pub fn factorize(m: &EngagementMatrix, k: usize) -> Result<Factorization> {
    let (rows, cols) = m.entries.shape();
    if k == 0 || k > rows.min(cols) {
        return Err(Error::Dimension(format!(
            "rank {k} must lie in 1..={} for a {rows}x{cols} matrix",
            rows.min(cols)
        )));
    }
    let svd = nalgebra::SVD::new(m.entries.clone(), true, true);
    let u = svd.u.expect("requested U");
    let v_t = svd.v_t.expect("requested Vt");
    let sv = svd.singular_values;

    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].total_cmp(&sv[a]).then(a.cmp(&b)));
    order.truncate(k);

    let mut user_factors = DMatrix::zeros(rows, k);
    let mut post_factors = DMatrix::zeros(cols, k);
    let mut singular_values = DVector::zeros(k);
    for (d, &src) in order.iter().enumerate() {
        let col = u.column(src);
        let tol = 1e-12 * col.amax().max(f64::MIN_POSITIVE);
        let sign = col
            .iter()
            .find(|v| v.abs() > tol)
            .map_or(1.0, |v| v.signum());
        for i in 0..rows {
            user_factors[(i, d)] = sign * u[(i, src)];
        }
        for j in 0..cols {
            post_factors[(j, d)] = sign * v_t[(src, j)];
        }
        singular_values[d] = sv[src].max(0.0);
    }
    let mut f = Factorization {
        user_factors,
        singular_values,
        post_factors,
        score_floor: 0.0,
    };
    f.score_floor = f.reconstruct().min();
    Ok(f)
}

/// Per-post assignment probabilities for a user embedding.
///
/// Scores are shifted by the factorization's score floor, clamped at zero and
/// normalized. A degenerate all-zero score vector yields the uniform feed.
pub fn assignment_probabilities(user_emb: &[f64], f: &Factorization) -> Result<Vec<f64>> {
    let scores = f.scores(user_emb)?;
    let shifted: Vec<f64> = scores.iter().map(|s| (s - f.score_floor).max(0.0)).collect();
    let total: f64 = shifted.iter().sum();
    let n = shifted.len() as f64;
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
    let scale = hi.abs().max(lo.abs()).max(f64::MIN_POSITIVE);
    if !(total > 1e-300) || hi - lo <= 1e-10 * scale {
        return Ok(vec![1.0 / n; shifted.len()]);
    }
    Ok(shifted.iter().map(|s| s / total).collect())
}

/// Probability mass a feed puts on toxic posts.
pub fn toxic_share(probs: &[f64], toxic: &[bool]) -> f64 {
    probs.iter().zip(toxic).filter(|(_, &t)| t).map(|(p, _)| p).sum()
}

/// Ball around the mean control embedding from which treated users draw
/// their daily embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EpsilonBall {
    pub centroid: Vec<f64>,
    /// Twice the sum of per-dimension sample variances of the control set.
    pub radius: f64,
}

impl EpsilonBall {
    pub fn from_embeddings(control_embs: &[Vec<f64>]) -> Result<Self> {
        if control_embs.len() < 2 {
            return Err(Error::InsufficientData("need at least 2 control embeddings".into()));
        }
        let k = control_embs[0].len();
        if k == 0 || control_embs.iter().any(|e| e.len() != k) {
            return Err(Error::Dimension("control embeddings must share a positive dimension".into()));
        }
        let mut centroid = Vec::with_capacity(k);
        let mut radius = 0.0;
        for d in 0..k {
            let col: Vec<f64> = control_embs.iter().map(|e| e[d]).collect();
            centroid.push(stats::mean(&col));
            radius += stats::variance(&col);
        }
        Ok(Self {
            centroid,
            radius: 2.0 * radius,
        })
    }

    /// Uniform point in the ball: Gaussian direction, radius `R·u^(1/k)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let k = self.centroid.len();
        if self.radius <= 0.0 {
            return self.centroid.clone();
        }
        let dir = loop {
            let d: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
            let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break d.into_iter().map(|v| v / norm).collect::<Vec<_>>();
            }
        };
        let r = self.radius * rng.random::<f64>().powf(1.0 / k as f64);
        self.centroid.iter().zip(dir).map(|(c, d)| c + r * d).collect()
    }
}

/// One draw from the treatment's embedding distribution.
pub fn sample_treatment_embedding<R: Rng + ?Sized>(control_embs: &[Vec<f64>], rng: &mut R) -> Result<Vec<f64>> {
    Ok(EpsilonBall::from_embeddings(control_embs)?.sample(rng))
}

/// Which posts in a synthetic catalogue are toxic: the first fifth.
pub fn synthetic_toxic_mask(n_posts: usize) -> Vec<bool> {
    let n_toxic = n_posts.div_ceil(5);
    (0..n_posts).map(|j| j < n_toxic).collect()
}

/// Synthetic engagement counts over `n_days`.
///
/// Each user has a toxic taste `t ~ Beta(2, 8)`; the non-toxic posts are
/// split round-robin into `k − 1` genres with Dirichlet(1) user weights.
/// Counts are Poisson with mean
/// `n_days/n_posts · (1 + 4·t·[toxic] + (1−t)·(k−1)·w_genre·[non-toxic])`.
/// Row `i` draws from its own stream, so the matrix depends only on `seed`.
pub fn simulate_engagement_matrix(
    n_users: usize,
    n_posts: usize,
    n_days: usize,
    k: usize,
    seed: u64,
) -> Result<EngagementMatrix> {
    if n_users == 0 || n_posts == 0 || n_days == 0 || k == 0 {
        return Err(Error::InvalidParams("matrix dimensions, days and rank must be positive".into()));
    }
    let toxic = synthetic_toxic_mask(n_posts);
    let n_genres = k.saturating_sub(1).max(1);
    let base = n_days as f64 / n_posts as f64;
    let taste = Beta::new(2.0, 8.0).expect("valid beta");
    let rows: Vec<Vec<f64>> = (0..n_users)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, Stream::Recommender, i as u64);
            let t: f64 = taste.sample(&mut rng);
            let raw: Vec<f64> = (0..n_genres).map(|_| Exp1.sample(&mut rng)).collect();
            let total: f64 = raw.iter().sum();
            let w: Vec<f64> = raw.iter().map(|x| x / total).collect();
            let mut genre = 0;
            (0..n_posts)
                .map(|j| {
                    let lam = if toxic[j] {
                        base * (1.0 + 4.0 * t)
                    } else {
                        let g = genre % n_genres;
                        genre += 1;
                        base * (1.0 + (1.0 - t) * n_genres as f64 * w[g])
                    };
                    Poisson::new(lam).expect("positive rate").sample(&mut rng)
                })
                .collect()
        })
        .collect();
    EngagementMatrix::from_rows(&rows)
}

/// Outcome of running the recommender on a synthetic population split into a
/// control half and a treated half.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentStudy {
    /// Toxic share of each control user's personalized feed.
    pub control_q: Vec<f64>,
    /// Treated users' personalized toxic share before the intervention.
    pub treated_baseline_q: Vec<f64>,
    /// Treated users' toxic share averaged over the intervention days.
    pub treated_q: Vec<f64>,
    /// Expected control-population engagement of the posts a control user is
    /// shown.
    pub control_popularity: Vec<f64>,
    pub treated_popularity: Vec<f64>,
}

/// Factorize a synthetic matrix of `n_control + n_treated` users and compare
/// personalized feeds against daily epsilon-ball feeds.
pub fn assignment_study(
    n_control: usize,
    n_treated: usize,
    n_posts: usize,
    n_days: usize,
    k: usize,
    seed: u64,
) -> Result<AssignmentStudy> {
    let n_users = n_control + n_treated;
    let m = simulate_engagement_matrix(n_users, n_posts, n_days, k, seed)?;
    let f = factorize(&m, k)?;
    let toxic = synthetic_toxic_mask(n_posts);
    let popularity = m.post_totals(0..n_control);
    let dot = |p: &[f64]| p.iter().zip(&popularity).map(|(a, b)| a * b).sum::<f64>();

    let control_embs: Vec<Vec<f64>> = (0..n_control).map(|i| f.user_embedding(i)).collect();
    let ball = EpsilonBall::from_embeddings(&control_embs)?;

    let personal: Vec<(f64, f64)> = (0..n_users)
        .map(|i| {
            let p = assignment_probabilities(&f.user_embedding(i), &f)?;
            Ok((toxic_share(&p, &toxic), dot(&p)))
        })
        .collect::<Result<_>>()?;

    let treated: Vec<(f64, f64)> = (n_control..n_users)
        .into_par_iter()
        .map(|i| {
            let mut rng = substream(seed, Stream::Assignment, i as u64);
            let (mut q, mut pop) = (0.0, 0.0);
            for _ in 0..n_days {
                let p = assignment_probabilities(&ball.sample(&mut rng), &f)?;
                q += toxic_share(&p, &toxic);
                pop += dot(&p);
            }
            Ok((q / n_days as f64, pop / n_days as f64))
        })
        .collect::<Result<_>>()?;

    Ok(AssignmentStudy {
        control_q: personal[..n_control].iter().map(|x| x.0).collect(),
        treated_baseline_q: personal[n_control..].iter().map(|x| x.0).collect(),
        treated_q: treated.iter().map(|x| x.0).collect(),
        control_popularity: personal[..n_control].iter().map(|x| x.1).collect(),
        treated_popularity: treated.iter().map(|x| x.1).collect(),
    })
}
