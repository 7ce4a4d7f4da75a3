use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::{ParamId, Tape, ValueGrid, Var};
use super::NetError;
use crate::geom::{Box3D, PointCloud, Vec3};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Channel width `D` of extracted and fused features.
    pub feature_dim: usize,
    pub n_template: usize,
    pub n_search: usize,
    pub n_proposals: usize,
    /// Ball-query radii of the two extraction stages, meters.
    pub radii: [f64; 2],
    pub neighbors: usize,
    /// Vote clustering radius, meters.
    pub vote_radius: f64,
    pub stage1_width: usize,
    pub stage2_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            n_template: 128,
            n_search: 256,
            n_proposals: 16,
            radii: [0.3, 0.5],
            neighbors: 16,
            vote_radius: 0.3,
            stage1_width: 32,
            stage2_hidden: 64,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: &str| Err(NetError::DimensionMismatch(m.to_string()));
        if self.feature_dim == 0 || self.stage1_width == 0 || self.stage2_hidden == 0 {
            return bad("layer widths must be positive");
        }
        for n in [self.n_template, self.n_search] {
            if n < 8 || n % 8 != 0 {
                return Err(NetError::TooFewPoints(n));
            }
        }
        if self.n_proposals == 0 || self.n_proposals > self.n_search / 8 {
            return bad("proposal count must lie in 1..=n_search/8");
        }
        if self.neighbors == 0 || !(self.radii[0] > 0.0 && self.radii[1] > 0.0 && self.vote_radius > 0.0) {
            return bad("radii and neighbor count must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

/// Fully connected layers; ReLU after every layer, or after every layer but
/// the last when `linear_out` is set.
#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<Linear>,
    linear_out: bool,
}

impl Mlp {
    fn build(store: &mut ParamStore, prefix: &str, widths: &[usize], linear_out: bool, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear {
                w: store.add_xavier(&format!("{prefix}.{i}.weight"), w[0], w[1], rng),
                b: store.add(&format!("{prefix}.{i}.bias"), ValueGrid::zeros(1, w[1])),
            })
            .collect();
        Self { layers, linear_out }
    }

    fn forward(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = tape.matmul(h, bound[l.w.0]);
            h = tape.add_bias(h, bound[l.b.0]);
            if !(self.linear_out && i == last) {
                h = tape.relu(h);
            }
        }
        h
    }
}

#[derive(Debug, Clone)]
struct Layers {
    stage1: Mlp,
    stage2: Mlp,
    fuse_pair: Mlp,
    fuse_out: Mlp,
    vote: Mlp,
    cls: Mlp,
    proposal: Mlp,
}

/// Network parameters and layer layout. Forward passes record onto a
/// caller-owned [`Tape`] and read parameters through leaf nodes, so a shared
/// `&Network` can run concurrent forward passes.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetConfig,
    params: ParamStore,
    layers: Layers,
}

/// Output of the proposal head. Values live on the tape; accessors copy
/// them out.
#[derive(Debug, Clone)]
pub struct ProposalOutput {
    pub seeds: Vec<Vec3>,
    /// `M×3` votes `seed + Δp`.
    pub votes: Var,
    /// `M×1` foreground probabilities.
    pub probs: Var,
    /// `N×3` proposal centers.
    pub centers: Var,
    /// `N×1` proposal yaws (unwrapped).
    pub yaws: Var,
    /// `N×1` proposal scores.
    pub scores: Var,
    pub template_size: [f64; 3],
}

impl ProposalOutput {
    /// Wraps plain values as constant leaves, for hand-built cases.
    pub fn from_values(
        tape: &mut Tape,
        seeds: Vec<Vec3>,
        votes: &[Vec3],
        probs: &[f64],
        boxes: &[Box3D],
        scores: &[f64],
    ) -> Self {
        let template_size = boxes.first().map(|b| b.size).unwrap_or([1.0; 3]);
        let votes = tape.constant(points_grid(votes));
        let probs = tape.constant(ValueGrid::column(probs.to_vec()));
        let centers: Vec<Vec3> = boxes.iter().map(|b| b.center).collect();
        let centers = tape.constant(points_grid(&centers));
        let yaws = tape.constant(ValueGrid::column(boxes.iter().map(|b| b.yaw).collect()));
        let scores = tape.constant(ValueGrid::column(scores.to_vec()));
        Self { seeds, votes, probs, centers, yaws, scores, template_size }
    }

    pub fn vote_points(&self, tape: &Tape) -> Vec<Vec3> {
        grid_points(tape.value(self.votes))
    }

    pub fn prob_values(&self, tape: &Tape) -> Vec<f64> {
        tape.value(self.probs).data().to_vec()
    }

    pub fn score_values(&self, tape: &Tape) -> Vec<f64> {
        tape.value(self.scores).data().to_vec()
    }

    pub fn boxes(&self, tape: &Tape) -> Vec<Box3D> {
        let centers = grid_points(tape.value(self.centers));
        let yaws = tape.value(self.yaws).data();
        centers
            .into_iter()
            .zip(yaws)
            .map(|(c, &yaw)| Box3D { center: c, size: self.template_size, yaw: crate::geom::wrap_angle(yaw) })
            .collect()
    }

    /// Highest-scoring proposal; ties resolve to the lowest index.
    pub fn best_box(&self, tape: &Tape) -> Box3D {
        let scores = self.score_values(tape);
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        self.boxes(tape)[best]
    }
}

/// One template/search forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `M_S×D` fused features.
    pub fused: Var,
    pub proposals: ProposalOutput,
}

pub(crate) fn points_grid(points: &[Vec3]) -> ValueGrid {
    ValueGrid::from_vec(points.len(), 3, points.iter().flat_map(|p| p.to_array()).collect())
}

fn grid_points(g: &ValueGrid) -> Vec<Vec3> {
    (0..g.rows()).map(|r| Vec3::new(g.get(r, 0), g.get(r, 1), g.get(r, 2))).collect()
}

/// Greedy farthest-point sampling. Starts at index 0; among equidistant
/// candidates the lowest index wins.
pub fn farthest_point_sample(points: &[Vec3], m: usize) -> Vec<usize> {
    let n = points.len();
    let m = m.min(n);
    if m == 0 {
        return Vec::new();
    }
    let mut chosen = Vec::with_capacity(m);
    let mut dist = vec![f64::INFINITY; n];
    let mut cur = 0;
    for _ in 0..m {
        chosen.push(cur);
        let c = points[cur];
        let mut best = 0;
        let mut best_d = f64::NEG_INFINITY;
        for (i, p) in points.iter().enumerate() {
            let d = p.distance(c);
            let d = if d < dist[i] {
                dist[i] = d;
                d
            } else {
                dist[i]
            };
            if d > best_d {
                best_d = d;
                best = i;
            }
        }
        cur = best;
    }
    chosen
}

/// Up to `k` nearest points within `radius` of each center (distance, then
/// index order). A center always finds itself.
pub fn ball_query(points: &[Vec3], centers: &[Vec3], radius: f64, k: usize) -> Vec<Vec<usize>> {
    centers
        .iter()
        .map(|c| {
            let mut cand: Vec<(f64, usize)> =
                points.iter().enumerate().map(|(i, p)| (p.distance(*c), i)).filter(|(d, _)| *d <= radius).collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.truncate(k);
            cand.into_iter().map(|(_, i)| i).collect()
        })
        .collect()
}

impl Network {
    /// Builds and initializes every layer from `seed`.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let mut r = rng::stream(seed, &[rng::tag::PARAM_INIT]);
        let d = config.feature_dim;
        let w1 = config.stage1_width;
        let layers = Layers {
            stage1: Mlp::build(&mut store, "extract.stage1", &[3, w1, w1], false, &mut r),
            stage2: Mlp::build(&mut store, "extract.stage2", &[3 + w1, config.stage2_hidden, d], false, &mut r),
            fuse_pair: Mlp::build(&mut store, "fuse.pair", &[d + 4, d], false, &mut r),
            fuse_out: Mlp::build(&mut store, "fuse.out", &[2 * d, d], false, &mut r),
            vote: Mlp::build(&mut store, "propose.vote", &[d, d, 3], true, &mut r),
            cls: Mlp::build(&mut store, "propose.cls", &[d, d, 1], true, &mut r),
            proposal: Mlp::build(&mut store, "propose.box", &[d, d, 5], true, &mut r),
        };
        Ok(Self { config, params: store, layers })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Zeroes the vote head so that votes coincide with seeds.
    pub fn zero_vote_head(&mut self) {
        for l in &self.layers.vote.layers {
            for id in [l.w, l.b] {
                self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }

    /// Records every parameter as a leaf; the result is indexed by `ParamId`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.ids().map(|id| tape.param(id, self.params.get(id))).collect()
    }

    /// Two-stage set abstraction. Returns `N/8` seeds and their `N/8 × D` features.
    pub fn extract_features(&self, tape: &mut Tape, bound: &[Var], cloud: &PointCloud) -> Result<(Vec<Vec3>, Var), NetError> {
        let n = cloud.len();
        if n < 8 || n % 8 != 0 {
            return Err(NetError::TooFewPoints(n));
        }
        let pts = &cloud.points;
        let [r1, r2] = self.config.radii;
        let k = self.config.neighbors;

        let idx1 = farthest_point_sample(pts, n / 2);
        let seeds1: Vec<Vec3> = idx1.iter().map(|&i| pts[i]).collect();
        let groups1 = ball_query(pts, &seeds1, r1, k);
        let mut offsets = Vec::new();
        let mut ranges = Vec::with_capacity(groups1.len());
        for (g, c) in groups1.iter().zip(&seeds1) {
            let start = offsets.len() / 3;
            for &j in g {
                offsets.extend(((pts[j] - *c) * (1.0 / r1)).to_array());
            }
            ranges.push((start..start + g.len()).collect::<Vec<_>>());
        }
        let input1 = tape.constant(ValueGrid::from_vec(offsets.len() / 3, 3, offsets));
        let h1 = self.layers.stage1.forward(tape, bound, input1);
        let f1 = tape.group_max(h1, &ranges);

        let idx2 = farthest_point_sample(&seeds1, n / 8);
        let seeds2: Vec<Vec3> = idx2.iter().map(|&i| seeds1[i]).collect();
        let groups2 = ball_query(&seeds1, &seeds2, r2, k);
        let mut offsets = Vec::new();
        let mut flat = Vec::new();
        let mut ranges = Vec::with_capacity(groups2.len());
        for (g, c) in groups2.iter().zip(&seeds2) {
            let start = flat.len();
            for &j in g {
                offsets.extend(((seeds1[j] - *c) * (1.0 / r2)).to_array());
                flat.push(j);
            }
            ranges.push((start..start + g.len()).collect::<Vec<_>>());
        }
        let off2 = tape.constant(ValueGrid::from_vec(flat.len(), 3, offsets));
        let nbr = tape.gather(f1, flat);
        let input2 = tape.concat_cols(vec![off2, nbr]);
        let h2 = self.layers.stage2.forward(tape, bound, input2);
        let f2 = tape.group_max(h2, &ranges);
        Ok((seeds2, f2))
    }

    /// Template-specific feature augmentation: for every search seed, a
    /// max-pool over template seeds of an MLP applied to
    /// `[cos(F_T[i], F_S[j]) ⊕ seed_T[i] ⊕ F_T[i]]`, then an MLP on
    /// `[pooled ⊕ F_S[j]]`.
    pub fn fuse_tfa(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        f_template: Var,
        seeds_template: &[Vec3],
        f_search: Var,
    ) -> Result<Var, NetError> {
        let (ft, fs) = (tape.value(f_template).shape(), tape.value(f_search).shape());
        if ft[1] != fs[1] || ft[1] != self.config.feature_dim || ft[0] != seeds_template.len() {
            return Err(NetError::DimensionMismatch(format!("template {ft:?} / search {fs:?} features")));
        }
        let (m_t, m_s) = (ft[0], fs[0]);
        let sim = tape.cosine_sim(f_template, f_search);
        let sim_t = tape.transpose(sim);
        let sim_col = tape.reshape(sim_t, m_s * m_t, 1);
        let seeds = tape.constant(points_grid(seeds_template));
        let tf = tape.concat_cols(vec![seeds, f_template]);
        let idx: Vec<usize> = (0..m_s).flat_map(|_| 0..m_t).collect();
        let tiled = tape.gather(tf, idx);
        let pair = tape.concat_cols(vec![sim_col, tiled]);
        let h = self.layers.fuse_pair.forward(tape, bound, pair);
        let pooled = tape.block_max(h, m_t);
        let joined = tape.concat_cols(vec![pooled, f_search]);
        Ok(self.layers.fuse_out.forward(tape, bound, joined))
    }

    /// Hough voting and proposal generation. Proposal boxes take
    /// `template_size`.
    pub fn propose(
        &self,
        tape: &mut Tape,
        bound: &[Var],
        fused: Var,
        seeds: &[Vec3],
        template_size: [f64; 3],
    ) -> Result<ProposalOutput, NetError> {
        let zs = tape.value(fused).shape();
        if zs[0] != seeds.len() || zs[1] != self.config.feature_dim {
            return Err(NetError::DimensionMismatch(format!("fused {zs:?} vs {} seeds", seeds.len())));
        }
        let seed_var = tape.constant(points_grid(seeds));
        let offsets = self.layers.vote.forward(tape, bound, fused);
        let votes = tape.add(seed_var, offsets);
        let logits = self.layers.cls.forward(tape, bound, fused);
        let probs = tape.sigmoid(logits);

        let vote_pts = grid_points(tape.value(votes));
        let centers_idx = farthest_point_sample(&vote_pts, self.config.n_proposals);
        let rho = self.config.vote_radius;
        let groups: Vec<Vec<usize>> = centers_idx
            .iter()
            .map(|&c| {
                let g: Vec<usize> = (0..vote_pts.len()).filter(|&j| vote_pts[j].distance(vote_pts[c]) <= rho).collect();
                if g.is_empty() {
                    vec![c]
                } else {
                    g
                }
            })
            .collect();
        let pooled = tape.group_max(fused, &groups);
        let head = self.layers.proposal.forward(tape, bound, pooled);
        let base = tape.gather(votes, centers_idx);
        let delta = tape.slice_cols(head, 0, 3);
        let centers = tape.add(base, delta);
        let yaws = tape.slice_cols(head, 3, 4);
        let score_logits = tape.slice_cols(head, 4, 5);
        let scores = tape.sigmoid(score_logits);
        Ok(ProposalOutput { seeds: seeds.to_vec(), votes, probs, centers, yaws, scores, template_size })
    }

    /// ψ on both clouds, φ, then γ.
    pub fn forward(
        &self,
        tape: &mut Tape,
        template: &PointCloud,
        search: &PointCloud,
        template_size: [f64; 3],
    ) -> Result<ForwardPass, NetError> {
        let bound = self.bind(tape);
        let (seeds_t, f_t) = self.extract_features(tape, &bound, template)?;
        let (seeds_s, f_s) = self.extract_features(tape, &bound, search)?;
        let fused = self.fuse_tfa(tape, &bound, f_t, &seeds_t, f_s)?;
        let proposals = self.propose(tape, &bound, fused, &seeds_s, template_size)?;
        Ok(ForwardPass { fused, proposals })
    }
}
