//! The partially collapsed Gibbs sampler.
//!
//! Each sweep updates, for every state in turn, the allocation (marginal
//! over the coefficients and the GP values), the rank, the GP values, the
//! loading and coefficient factors, `ρ`, the transition row, and the GP
//! hyperparameters. It then redraws the state path, fixes the labels, and
//! updates the volatility block. The order is fixed: the collapsed draws
//! must come before the draws of what they integrate out.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{validate, PriorConfig};
use crate::continuous::{
    bridge_coefficients, embed_coef, ldl_factor, sample_alpha, sample_beta, sample_constant_sigma, sample_w,
};
use crate::covariance::{conditional_stats, CollapsedModel, NoiseCov};
use crate::data::Dataset;
use crate::discrete::{log_prior_gamma, msss_step, sample_rank, sample_rho, sample_xi_row, EvidenceCache};
use crate::error::{Error, Result, ValidationErrors};
use crate::gp::{build_kernel, default_jitter, griddy_update_hypers};
use crate::hmm::{emission_loglik, ffbs, relabel, reproject_gp};
use crate::laplace::{max_rank, EvidenceTable, Tolerance};
use crate::rng::{component, stream_rng};
use crate::state::{assemble_loading, init_state, ChainState, StateParams};
use crate::store::{Checkpoint, DrawRecord, DrawStore, DrawWriter, RunMeta};
use crate::sv::{sample_h, sample_h0, sample_sigma2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Markov switching with stochastic volatility.
    MsPrr,
    /// One state with stochastic volatility.
    PrrGp,
    /// Markov switching with one inverse-Wishart covariance.
    ConstantVolatility,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::MsPrr => "ms-prr",
            Variant::PrrGp => "prr-gp",
            Variant::ConstantVolatility => "constant-volatility",
        }
    }

    pub fn stochastic_volatility(self) -> bool {
        !matches!(self, Variant::ConstantVolatility)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ms-prr" => Ok(Variant::MsPrr),
            "prr-gp" => Ok(Variant::PrrGp),
            "constant-volatility" => Ok(Variant::ConstantVolatility),
            _ => Err(Error::Validation(ValidationErrors::single(
                "variant",
                format!("unknown variant {s:?} (expected ms-prr, prr-gp or constant-volatility)"),
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunPlan {
    pub iterations: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub seed: u64,
    /// Sweeps between checkpoints when writing to a directory; 0 disables.
    pub checkpoint_every: u64,
    pub variant: Variant,
}

impl RunPlan {
    pub fn new(iterations: u64, burn_in: u64, seed: u64, variant: Variant) -> Self {
        Self {
            iterations,
            burn_in,
            thin: 1,
            seed,
            checkpoint_every: 0,
            variant,
        }
    }

    pub fn check(&self) -> Result<()> {
        let mut errs = ValidationErrors::default();
        if self.burn_in >= self.iterations {
            errs.push("burn_in", "must be smaller than iterations");
        }
        if self.thin == 0 {
            errs.push("thin", "must be at least 1");
        }
        errs.into_result()
    }

    fn keeps(&self, sweep: u64) -> bool {
        sweep > self.burn_in && (sweep - self.burn_in) % self.thin == 0
    }
}

/// One step of a sweep, reported to observers before it runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepStep {
    Gamma(usize),
    Rank(usize),
    GpValues(usize),
    Alpha(usize),
    Beta(usize),
    Rho(usize),
    Xi(usize),
    Zeta(usize),
    SignalVariance(usize),
    States,
    Relabel,
    LogVariance(usize),
    InitialLogVariance(usize),
    VolatilityVariance(usize),
    W,
    ConstantSigma,
}

pub struct Sampler<'a> {
    data: &'a Dataset,
    config: PriorConfig,
    plan: RunPlan,
    pub state: ChainState,
    /// Completed sweeps.
    pub sweep: u64,
}

/// Effective prior settings for a variant (one state for `prr-gp`).
pub fn variant_config(config: &PriorConfig, variant: Variant) -> PriorConfig {
    match variant {
        Variant::PrrGp if config.k != 1 => {
            let mut c = config.clone();
            c.k = 1;
            c.dirichlet_d = Vec::new();
            c
        }
        _ => config.clone(),
    }
}

impl<'a> Sampler<'a> {
    pub fn new(data: &'a Dataset, config: &PriorConfig, plan: RunPlan) -> Result<Self> {
        plan.check()?;
        let config = variant_config(config, plan.variant);
        validate(&config, data)?;
        let state = init_state(&config, data, plan.seed)?;
        Ok(Self {
            data,
            config,
            plan,
            state,
            sweep: 0,
        })
    }

    pub fn from_checkpoint(data: &'a Dataset, config: &PriorConfig, plan: RunPlan, cp: Checkpoint) -> Result<Self> {
        plan.check()?;
        let config = variant_config(config, plan.variant);
        validate(&config, data)?;
        cp.state.check_structure(data.t(), data.p(), data.q())?;
        Ok(Self {
            data,
            config,
            plan,
            state: cp.state,
            sweep: cp.sweep,
        })
    }

    pub fn config(&self) -> &PriorConfig {
        &self.config
    }

    pub fn meta(&self) -> RunMeta {
        RunMeta {
            seed: self.plan.seed,
            iterations: self.plan.iterations,
            burn_in: self.plan.burn_in,
            thin: self.plan.thin,
            variant: self.plan.variant.name().into(),
            config: self.config.clone(),
            t: self.data.t(),
            p: self.data.p(),
            q: self.data.q(),
        }
    }

    fn rng(&self, comp: u64) -> rand_chacha::ChaCha8Rng {
        stream_rng(self.plan.seed, self.sweep + 1, comp)
    }

    /// Inverse temperature applied to the allocation target during the
    /// current sweep; exactly 1 once tempering ends or after burn-in.
    pub fn inverse_temperature(&self) -> f64 {
        let n = (self.config.anneal_sweeps as u64).min(self.plan.burn_in / 2);
        let sweep = self.sweep + 1;
        if sweep > n {
            return 1.0;
        }
        self.config.anneal_start.powf(1.0 - (sweep - 1) as f64 / n as f64)
    }

    fn noise_for(&self, times: &[usize]) -> NoiseCov {
        if self.plan.variant.stochastic_volatility() {
            NoiseCov::PerTime(self.state.sigmas(times))
        } else {
            NoiseCov::Constant(self.state.sigma_at(0))
        }
    }

    /// One full sweep.
    pub fn step(&mut self, observer: &mut dyn FnMut(SweepStep)) -> Result<()> {
        let previous_gammas: Vec<Vec<bool>> = self.state.states.iter().map(|s| s.gamma.clone()).collect();
        for k in 0..self.state.k() {
            self.update_state(k, observer)?;
        }

        observer(SweepStep::States);
        let em = emission_loglik(&self.state, self.data)?;
        let new_s = ffbs(&em, &self.state.xi, &mut self.rng(component::STATES))?;
        reproject_gp(&mut self.state, self.data, &new_s)?;
        observer(SweepStep::Relabel);
        relabel(&mut self.state, &previous_gammas, self.config.d_val);

        let resid = &self.data.y - self.state.fitted_mean(self.data);
        if self.plan.variant.stochastic_volatility() {
            self.update_volatility(&resid, observer)?;
        } else {
            observer(SweepStep::ConstantSigma);
            let q = self.data.q();
            let scale = DMatrix::identity(q, q) * self.config.iw_scale;
            let sigma = sample_constant_sigma(&resid, self.config.iw_df_for(q), &scale, &mut self.rng(component::SIGMA))?;
            let (w, log_d) = ldl_factor(&sigma)?;
            self.state.w = w;
            for t in 0..self.data.t() {
                self.state.h.set_row(t, &log_d.transpose());
            }
        }
        self.sweep += 1;
        Ok(())
    }

    fn update_volatility(&mut self, resid: &DMatrix<f64>, observer: &mut dyn FnMut(SweepStep)) -> Result<()> {
        let q = self.data.q();
        let u = resid * self.state.w.transpose();
        for j in 0..q {
            observer(SweepStep::LogVariance(j));
            observer(SweepStep::InitialLogVariance(j));
            observer(SweepStep::VolatilityVariance(j));
        }
        let cfg = &self.config;
        let st = &self.state;
        let seed = self.plan.seed;
        let sweep = self.sweep + 1;
        let updates: Vec<(Vec<f64>, f64, f64)> = (0..q)
            .into_par_iter()
            .map(|j| {
                let uj: Vec<f64> = u.column(j).iter().copied().collect();
                let hj: Vec<f64> = st.h.column(j).iter().copied().collect();
                let s2 = st.sigma2_sv[j];
                let h = sample_h(&uj, &hj, st.h0[j], s2, &mut stream_rng(seed, sweep, component::H + j as u64));
                let h0 = sample_h0(h[0], s2, cfg.upsilon0_sq, &mut stream_rng(seed, sweep, component::H0 + j as u64));
                let s2 = sample_sigma2(
                    &h,
                    h0,
                    cfg.a_sv,
                    cfg.b_sv,
                    &mut stream_rng(seed, sweep, component::SIGMA2_SV + j as u64),
                );
                (h, h0, s2)
            })
            .collect();
        for (j, (h, h0, s2)) in updates.into_iter().enumerate() {
            for (t, v) in h.into_iter().enumerate() {
                self.state.h[(t, j)] = v;
            }
            self.state.h0[j] = h0;
            self.state.sigma2_sv[j] = s2;
        }
        observer(SweepStep::W);
        self.state.w = sample_w(resid, &self.state.h, self.config.omega_w, &mut self.rng(component::W))?;
        Ok(())
    }

    fn update_state(&mut self, k: usize, observer: &mut dyn FnMut(SweepStep)) -> Result<()> {
        let times = self.state.times(k);
        let (y_k, x_k) = self.data.subset(&times);
        let noise = self.noise_for(&times);
        let cur = self.state.states[k].clone();
        let (p, q) = (self.data.p(), self.data.q());
        let t_k = times.len();
        let tol = Tolerance {
            tol: self.config.grrr_tol,
            max_iter: self.config.grrr_max_iter,
        };
        let k64 = k as u64;

        let next = if t_k == 0 {
            self.prior_state(k, &cur, observer)?
        } else {
            let kernel = build_kernel(&x_k, cur.sigma2_f, cur.zeta, default_jitter(cur.sigma2_f))?;
            let model = CollapsedModel::new(&y_k, &x_k, &noise, &kernel)?;
            let cache = EvidenceCache::default();
            let table = |g: &[bool]| cache.get_or_insert(g, || EvidenceTable::build(&model.gls_stats(g)?, t_k, tol));
            let rho = cur.rho;
            let tau = self.inverse_temperature();

            observer(SweepStep::Gamma(k));
            let out = msss_step(
                &cur.gamma,
                |g| Ok(tau * (table(g)?.gamma_log_marginal() + log_prior_gamma(g, rho))),
                &mut self.rng(component::GAMMA + k64),
            )?;
            let gamma = out.gamma;
            observer(SweepStep::Rank(k));
            let probs = table(&gamma)?.rank_posterior();
            let rank = sample_rank(&probs, &mut self.rng(component::RANK + k64));

            let (c_star, b_star) = if gamma == cur.gamma && rank == cur.rank {
                bridge_coefficients(&embed_coef(&cur.coef(), &cur.gamma), &gamma, rank)
            } else {
                // the previous draw carries no information on the new
                // layout: start from the reduced-rank estimate instead
                let mle = &table(&gamma)?.entries[rank - 1].mle;
                (mle.c_hat.clone(), mle.b_hat.clone())
            };

            observer(SweepStep::GpValues(k));
            let resid = &y_k - &x_k * embed_coef(&c_star, &gamma);
            let (f, _) = model.sample_f(&gamma, &resid, &mut self.rng(component::F + k64))?;

            observer(SweepStep::Alpha(k));
            let mut target = y_k.clone();
            for (i, j) in (0..q).filter(|&j| !gamma[j]).enumerate() {
                let col = target.column(j) - f.column(i);
                target.set_column(j, &col);
            }
            let stats = conditional_stats(&target, &x_k, &noise, &gamma)?;
            let a0 = sample_alpha(&stats, &b_star, self.config.a_coef, &mut self.rng(component::ALPHA + k64))?;

            observer(SweepStep::Beta(k));
            let b = sample_beta(
                &stats,
                &assemble_loading(&a0, rank),
                self.config.b_coef,
                &mut self.rng(component::BETA + k64),
            )?;
            debug_assert_eq!(b.shape(), (p, rank));
            StateParams {
                gamma,
                rank,
                a0,
                b,
                f,
                ..cur.clone()
            }
        };
        self.state.states[k] = next;
        self.finish_state(k, &x_k, observer);
        Ok(())
    }

    /// Updates for a state that currently owns no time points: every block
    /// falls back to its prior.
    fn prior_state(&self, k: usize, cur: &StateParams, observer: &mut dyn FnMut(SweepStep)) -> Result<StateParams> {
        let (p, q) = (self.data.p(), self.data.q());
        let k64 = k as u64;
        observer(SweepStep::Gamma(k));
        let rho = cur.rho;
        let gamma = msss_step(
            &cur.gamma,
            |g| Ok(log_prior_gamma(g, rho)),
            &mut self.rng(component::GAMMA + k64),
        )?
        .gamma;
        let q_gamma = gamma.iter().filter(|v| **v).count();
        observer(SweepStep::Rank(k));
        let rmax = max_rank(p, q_gamma);
        let rank = self.rng(component::RANK + k64).random_range(1..=rmax);
        observer(SweepStep::GpValues(k));
        let f = DMatrix::zeros(0, q - q_gamma);
        observer(SweepStep::Alpha(k));
        let mut rng = self.rng(component::ALPHA + k64);
        let sd_a = self.config.a_coef.sqrt();
        let a0 = DMatrix::from_fn(q_gamma - rank, rank, |_, _| sd_a * rng.sample::<f64, _>(StandardNormal));
        observer(SweepStep::Beta(k));
        let mut rng = self.rng(component::BETA + k64);
        let sd_b = self.config.b_coef.sqrt();
        let b = DMatrix::from_fn(p, rank, |_, _| sd_b * rng.sample::<f64, _>(StandardNormal));
        Ok(StateParams {
            gamma,
            rank,
            a0,
            b,
            f,
            ..cur.clone()
        })
    }

    fn finish_state(&mut self, k: usize, x_k: &DMatrix<f64>, observer: &mut dyn FnMut(SweepStep)) {
        let k64 = k as u64;
        observer(SweepStep::Rho(k));
        let rho = sample_rho(&self.state.states[k].gamma, &self.config, &mut self.rng(component::RHO + k64));
        self.state.states[k].rho = rho;

        observer(SweepStep::Xi(k));
        let row = sample_xi_row(&self.state.s, k, &self.config, &mut self.rng(component::XI + k64));
        for (l, v) in row.into_iter().enumerate() {
            self.state.xi[(k, l)] = v;
        }

        observer(SweepStep::Zeta(k));
        observer(SweepStep::SignalVariance(k));
        let st = &self.state.states[k];
        let draw = griddy_update_hypers(
            &st.f,
            x_k,
            st.sigma2_f,
            st.zeta,
            &self.config,
            &mut self.rng(component::ZETA + k64),
        );
        let st = &mut self.state.states[k];
        st.zeta = draw.zeta;
        st.sigma2_f = draw.sigma2_f;
    }

    /// Runs sweeps until `until` sweeps are complete (capped at the plan's
    /// iteration count), pushing retained draws to `sink`.
    pub fn run_until(
        &mut self,
        until: u64,
        observer: &mut dyn FnMut(SweepStep),
        sink: &mut dyn FnMut(&Sampler, DrawRecord) -> Result<()>,
    ) -> Result<()> {
        let until = until.min(self.plan.iterations);
        while self.sweep < until {
            self.step(observer)?;
            if self.plan.keeps(self.sweep) {
                let rec = DrawRecord {
                    sweep: self.sweep,
                    state: self.state.clone(),
                };
                sink(self, rec)?;
            }
            if self.sweep % 500 == 0 {
                log::info!("sweep {}/{}", self.sweep, self.plan.iterations);
            }
        }
        Ok(())
    }
}

/// Runs the full plan in memory.
pub fn run_pcg(data: &Dataset, config: &PriorConfig, plan: &RunPlan) -> Result<DrawStore> {
    run_pcg_observed(data, config, plan, &mut |_| {})
}

pub fn run_pcg_observed(
    data: &Dataset,
    config: &PriorConfig,
    plan: &RunPlan,
    observer: &mut dyn FnMut(SweepStep),
) -> Result<DrawStore> {
    let mut sampler = Sampler::new(data, config, plan.clone())?;
    let mut store = DrawStore::new(sampler.meta());
    sampler.run_until(plan.iterations, observer, &mut |_, rec| {
        store.draws.push(rec);
        Ok(())
    })?;
    Ok(store)
}

/// Runs the plan writing draws, checkpoints and metadata to `dir`. With
/// `resume` set and a checkpoint present, continues from it. `stop_after`
/// ends the run early (after that many completed sweeps), leaving a
/// checkpoint behind.
pub fn run_to_dir(
    data: &Dataset,
    config: &PriorConfig,
    plan: &RunPlan,
    dir: &Path,
    resume: bool,
    stop_after: Option<u64>,
) -> Result<DrawStore> {
    std::fs::create_dir_all(dir)?;
    let (mut sampler, mut writer, mut draws) = match (resume, Checkpoint::read(dir)?) {
        (true, Some(cp)) => {
            let keep = cp.draws;
            let sampler = Sampler::from_checkpoint(data, config, plan.clone(), cp)?;
            let (writer, kept) = DrawWriter::resume(dir, keep)?;
            (sampler, writer, kept)
        }
        _ => (Sampler::new(data, config, plan.clone())?, DrawWriter::create(dir)?, Vec::new()),
    };
    crate::store::write_meta(dir, &sampler.meta())?;
    let every = plan.checkpoint_every;
    let target = stop_after.unwrap_or(plan.iterations).min(plan.iterations);
    while sampler.sweep < target {
        let next = if every > 0 {
            ((sampler.sweep / every + 1) * every).min(target)
        } else {
            target
        };
        sampler.run_until(next, &mut |_| {}, &mut |_, rec| {
            writer.push(&rec)?;
            draws.push(rec);
            Ok(())
        })?;
        writer.flush()?;
        Checkpoint {
            sweep: sampler.sweep,
            state: sampler.state.clone(),
            draws: writer.count(),
        }
        .write(dir)?;
    }
    Ok(DrawStore {
        meta: sampler.meta(),
        draws,
    })
}
