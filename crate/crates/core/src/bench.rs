//! Measurement harness: inference success rate, real-time factor, cache cost
//! ablation and the built-in self-test.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::HistoryDepth;
use crate::engine::{close_session, offline_oracle, open_session, run_session, FaultPlan, ModelBundle, SessionConfig, StepOutput};
use crate::error::{Error, Result};
use crate::frontend::{chunk_waveform, synth_scene_with_reference, validate_chunk_spec, SynthScene, Waveform};
use crate::layout::{build_prefix, layout_length, sequential_recompute, PositionRole, SequenceElement, Stage, Strategy};
use crate::model::ModelConfig;
use crate::train::{batch_loss_graph, hybrid_loss, make_training_batch_with, BatchConfig, LossBreakdown, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsrReport {
    pub n_samples: usize,
    pub n_valid: usize,
    pub isr_percent: f64,
}

impl IsrReport {
    /// One flag per run; a run counts as valid when its flag is set.
    pub fn from_flags(flags: &[bool]) -> Result<Self> {
        if flags.is_empty() {
            return Err(Error::Config("ISR needs at least one run".into()));
        }
        let n_valid = flags.iter().filter(|&&f| f).count();
        Ok(Self { n_samples: flags.len(), n_valid, isr_percent: 100.0 * n_valid as f64 / flags.len() as f64 })
    }
}

/// Runs one session per scene with the matching fault plan. A run is valid
/// iff every step is valid.
pub fn eval_isr(bundle: &ModelBundle, base: &SessionConfig, scenes: &[SynthScene], faults: &[FaultPlan], parallel: bool) -> Result<IsrReport> {
    if scenes.len() != faults.len() {
        return Err(Error::Config(format!("{} scenes but {} fault plans", scenes.len(), faults.len())));
    }
    let run = |(scene, plan): (&SynthScene, &FaultPlan)| -> Result<bool> {
        let config = SessionConfig { faults: plan.clone(), ..base.clone() };
        let (_, report, _) = run_session(bundle, config, &scene.reference, &scene.mixture)?;
        Ok(report.all_valid())
    };
    let flags: Vec<bool> = if parallel {
        scenes.par_iter().zip(faults.par_iter()).map(run).collect::<Result<_>>()?
    } else {
        scenes.iter().zip(faults).map(run).collect::<Result<_>>()?
    };
    IsrReport::from_flags(&flags)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RtfReport {
    pub t_proc_s: f64,
    pub t_speech_s: f64,
    pub rtf: f64,
    pub chunk_ms: u32,
    pub hardware_label: String,
}

impl RtfReport {
    pub fn new(t_proc_s: f64, t_speech_s: f64, chunk_ms: u32, hardware_label: impl Into<String>) -> Result<Self> {
        if !(t_speech_s > 0.0) {
            return Err(Error::Config("speech duration must be positive".into()));
        }
        Ok(Self { t_proc_s, t_speech_s, rtf: t_proc_s / t_speech_s, chunk_ms, hardware_label: hardware_label.into() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RtfConfig {
    pub session: SessionConfig,
    pub duration_s: f64,
    pub repeats: usize,
    pub reference_ms: u32,
    pub seed: u64,
    /// Extra wall-clock delay per chunk, as a fraction of the chunk duration.
    pub injected_delay: f64,
    pub hardware_label: String,
}

impl Default for RtfConfig {
    fn default() -> Self {
        Self {
            session: SessionConfig::default(),
            duration_s: 5.6,
            repeats: 3,
            reference_ms: 5000,
            seed: 0,
            injected_delay: 0.0,
            hardware_label: "unspecified".into(),
        }
    }
}

/// Wall-clock time of reference encoding, feature extraction, inference and
/// waveform reconstruction over a synthetic mixture; median over repeats.
pub fn bench_rtf(bundle: &ModelBundle, cfg: &RtfConfig) -> Result<RtfReport> {
    if !(cfg.duration_s > 0.0) || cfg.repeats == 0 {
        return Err(Error::Config("duration and repeats must be positive".into()));
    }
    let spec = validate_chunk_spec(cfg.session.chunk_ms)?;
    let frames = (cfg.duration_s * 1000.0 / 40.0).round().max(1.0) as u32;
    let scene = synth_scene_with_reference(cfg.seed, frames * 40, cfg.reference_ms, 0.0);
    let delay = Duration::from_secs_f64(cfg.injected_delay * spec.duration_s());
    let mut times = Vec::with_capacity(cfg.repeats);
    for _ in 0..cfg.repeats {
        let start = Instant::now();
        let mut session = open_session(bundle, cfg.session.clone(), &scene.reference)?;
        for chunk in chunk_waveform(&scene.mixture, &spec) {
            session.process_chunk(&chunk)?;
            if !delay.is_zero() {
                std::thread::sleep(delay);
            }
        }
        let _ = close_session(session);
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    RtfReport::new(times[times.len() / 2], scene.mixture.duration_s(), spec.chunk_ms, cfg.hardware_label.clone())
}

/// Measured against closed-form cache cost for one step of one session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostRow {
    pub chunk_ms: u32,
    pub m: usize,
    pub strategy: String,
    pub t: usize,
    pub selm_appended: usize,
    pub arlm_appended: usize,
    pub arlm_recomputed: usize,
    pub invalidated: bool,
    pub predicted_selm_appended: usize,
    pub predicted_arlm_appended: usize,
    pub predicted_arlm_recomputed: usize,
    /// Mixture positions in the acoustic layout after this step.
    pub mix_positions: usize,
    pub arlm_length: usize,
    pub predicted_arlm_length: usize,
    pub matches: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTable {
    pub steps: usize,
    pub rows: Vec<CostRow>,
}

impl CostTable {
    pub fn all_match(&self) -> bool {
        self.rows.iter().all(|r| r.matches)
    }
}

/// Streams `steps` chunks per (chunk size, strategy) and tabulates the ledger.
pub fn ablate_cost(bundle: &ModelBundle, chunk_ms: &[u32], strategies: &[Strategy], steps: usize, seed: u64) -> Result<CostTable> {
    let mut rows = Vec::new();
    for &ms in chunk_ms {
        let spec = validate_chunk_spec(ms)?;
        let m = spec.codec_frames_per_chunk;
        let scene = synth_scene_with_reference(seed, ms * steps as u32, 200, 0.0);
        for &strategy in strategies {
            let mut session = open_session(bundle, SessionConfig::new(ms, strategy, HistoryDepth::None), &scene.reference)?;
            let n_ref = session.reference().frames.rows();
            for chunk in chunk_waveform(&scene.mixture, &spec) {
                session.process_chunk(&chunk)?;
                let rec = session.ledger().last().cloned().expect("one record per step");
                let t = rec.t;
                let (pa, pr) = match strategy {
                    Strategy::Interleaved => (2 * m, 0),
                    Strategy::Sequential => (2 * m, sequential_recompute(t, m)),
                    Strategy::RefOnly => (m, 0),
                };
                let layout = session.arlm_layout();
                let mix_positions = layout.positions().iter().filter(|p| matches!(p, PositionRole::Mix { .. })).count();
                let predicted_len = layout_length(t, n_ref, m, Stage::Arlm, strategy)?;
                let row = CostRow {
                    chunk_ms: ms,
                    m,
                    strategy: strategy.to_string(),
                    t,
                    selm_appended: rec.selm.appended,
                    arlm_appended: rec.arlm.appended,
                    arlm_recomputed: rec.arlm.recomputed,
                    invalidated: rec.arlm.invalidated || rec.selm.invalidated,
                    predicted_selm_appended: 2 * m + 1,
                    predicted_arlm_appended: pa,
                    predicted_arlm_recomputed: pr,
                    mix_positions,
                    arlm_length: layout.len(),
                    predicted_arlm_length: predicted_len,
                    matches: false,
                };
                let matches = row.selm_appended == row.predicted_selm_appended
                    && row.arlm_appended == row.predicted_arlm_appended
                    && row.arlm_recomputed == row.predicted_arlm_recomputed
                    && row.arlm_length == row.predicted_arlm_length
                    && (strategy != Strategy::Interleaved || !row.invalidated);
                rows.push(CostRow { matches, ..row });
            }
        }
    }
    Ok(CostTable { steps, rows })
}

/// Changes the grammar string of `elements`: swaps two elements with
/// different tags or steps, drops one, or duplicates one.
pub fn mutate_elements(elements: &[SequenceElement], rng: &mut impl Rng) -> Vec<SequenceElement> {
    let mut out = elements.to_vec();
    let key = |e: &SequenceElement| (e.tag(), e.step());
    loop {
        match rng.gen_range(0..3) {
            0 => {
                let (i, j) = (rng.gen_range(0..out.len()), rng.gen_range(0..out.len()));
                if key(&out[i]) != key(&out[j]) {
                    out.swap(i, j);
                    return out;
                }
            }
            1 => {
                out.remove(rng.gen_range(0..out.len()));
                return out;
            }
            _ => {
                let i = rng.gen_range(0..out.len());
                let e = out[i].clone();
                out.insert(i, e);
                return out;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelftestReport {
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

fn check(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult { name: name.into(), passed, detail }
}

fn outputs_equal(a: &[StepOutput], b: &[StepOutput]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x == y)
}

/// Quick pass over the core invariants.
pub fn selftest(seed: u64) -> SelftestReport {
    let cfg = ModelConfig { d_model: 16, d_ff: 32, ..ModelConfig::micro(seed) };
    let bundle = match ModelBundle::new(cfg) {
        Ok(b) => b,
        Err(e) => {
            let c = CheckResult { name: "model".into(), passed: false, detail: e.to_string() };
            return SelftestReport { checks: vec![c], passed: false };
        }
    };
    let mut checks = Vec::new();

    checks.push(check("causality", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (i, ms) in [80u32, 160, 400].into_iter().enumerate() {
            let scene = synth_scene_with_reference(seed + i as u64, ms * 3, 200, 0.0);
            let config = SessionConfig::new(ms, Strategy::Interleaved, HistoryDepth::One);
            let (_, _, base) = run_session(&bundle, config.clone(), &scene.reference, &scene.mixture)?;
            let split = rng.gen_range(1..3) * ms as usize * 16;
            let mut samples = scene.mixture.samples().to_vec();
            samples[split..].iter_mut().for_each(|s| *s = rng.gen_range(-0.5..0.5));
            let (_, _, pert) = run_session(&bundle, config, &scene.reference, &Waveform::new(samples, 16_000)?)?;
            let k = split / (ms as usize * 16);
            if !outputs_equal(&base[..k], &pert[..k]) {
                return Ok((false, format!("{ms} ms: prefix changed")));
            }
        }
        Ok((true, "prefix outputs unchanged under suffix perturbation".into()))
    }));

    checks.push(check("cache equivalence", || {
        let mut worst = 0.0f64;
        for (i, strategy) in [Strategy::Interleaved, Strategy::Sequential, Strategy::RefOnly].into_iter().enumerate() {
            let scene = synth_scene_with_reference(seed + 10 + i as u64, 480, 200, 0.0);
            let config = SessionConfig::new(160, strategy, HistoryDepth::One);
            let (_, _, outs) = run_session(&bundle, config.clone(), &scene.reference, &scene.mixture)?;
            let oracle = offline_oracle(&bundle, &config, &scene.reference, &scene.mixture)?;
            for (o, t) in outs.iter().zip(0..) {
                if o.tokens.first_q != oracle.tokens[t] {
                    return Ok((false, format!("{strategy} step {}: tokens differ", t + 1)));
                }
                worst = worst.max(o.hidden.vectors.max_abs_diff(&oracle.hidden[t]));
            }
        }
        Ok((worst <= 1e-5, format!("max hidden difference {worst:e}")))
    }));

    checks.push(check("layout grammar", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reference = streamtse_nn::Tensor2::filled(3, 4, 0.1);
        let mix = streamtse_nn::Tensor2::filled(2, 4, 0.2);
        let mut false_accepts = 0;
        for strategy in [Strategy::Interleaved, Strategy::Sequential, Strategy::RefOnly] {
            let mut selm = build_prefix(&reference, Stage::Selm, Strategy::Interleaved, 2)?;
            let mut arlm = build_prefix(&reference, Stage::Arlm, strategy, 2)?;
            for t in 1..=3 {
                selm.append_selm_step(t, &mix, &[1, 2])?;
                arlm.append_arlm_step(t, &mix, &[1, 2])?;
            }
            selm.validate()?;
            arlm.validate()?;
            for layout in [&selm, &arlm] {
                for _ in 0..20 {
                    let bad = mutate_elements(layout.elements(), &mut rng);
                    if crate::layout::validate_elements(&bad, layout.stage(), layout.strategy(), 3, 2, 3).is_ok() {
                        false_accepts += 1;
                    }
                }
            }
        }
        Ok((false_accepts == 0, format!("{false_accepts} false accepts of 120 mutations")))
    }));

    checks.push(check("gradient", || {
        let cfg = ModelConfig::micro(seed);
        let params = cfg.init_params()?;
        let spec = validate_chunk_spec(80)?;
        let batch = make_training_batch_with(seed, &spec, 1, &BatchConfig { steps: 2, reference_ms: 80, snr_db: 0.0 }, &Default::default())?;
        let tc = TrainConfig::default();
        let f = |g: &mut streamtse_nn::Graph, p: &streamtse_nn::ParamSet| {
            batch_loss_graph(g, &cfg, p, &batch, &tc).map(|n| n.total).map_err(|e| streamtse_nn::NnError::Checkpoint(e.to_string()))
        };
        let (_, analytic) = streamtse_nn::grad(f, &params)?;
        let numeric = streamtse_nn::finite_difference_grad(f, &params, 1e-4)?;
        let (err, name) = streamtse_nn::max_relative_error(&analytic, &numeric);
        Ok((err <= 1e-3, format!("max relative error {err:e} ({name})")))
    }));

    checks.push(check("loss arithmetic", || {
        let b = LossBreakdown::new(2.0, 0.5, 1.0, 1.0);
        let logits = streamtse_nn::Tensor2::from_vec(1, 2, vec![0.0, 0.0])?;
        let lat = streamtse_nn::Tensor2::filled(1, 2, 1.0);
        let h = hybrid_loss(&logits, &[Some(0)], &lat, &lat, 0.5, 2.0)?;
        Ok((b.total == 2.5 && h.total == 0.5 * h.nll + 2.0 * h.reg && h.reg == 0.0, format!("total {}", b.total)))
    }));

    checks.push(check("isr arithmetic", || {
        let r = IsrReport::from_flags(&[true, true, false, true])?;
        Ok((r.isr_percent == 75.0, format!("{:.2}%", r.isr_percent)))
    }));

    checks.push(check("rtf arithmetic", || {
        let r = RtfReport::new(1.386, 5.6, 560, "selftest")?;
        Ok((r.rtf == 1.386 / 5.6 && (r.rtf - 0.2475).abs() < 1e-12, format!("rtf {}", r.rtf)))
    }));

    let passed = checks.iter().all(|c| c.passed);
    SelftestReport { checks, passed }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelBundle {
        ModelBundle::new(ModelConfig { d_model: 8, d_ff: 16, ..ModelConfig::micro(1) }).unwrap()
    }

    #[test]
    fn isr_arithmetic() {
        assert_eq!(IsrReport::from_flags(&[true, false, true, true]).unwrap().isr_percent, 75.0);
        assert_eq!(IsrReport::from_flags(&[false; 3]).unwrap().isr_percent, 0.0);
        assert!(IsrReport::from_flags(&[]).is_err());
    }

    #[test]
    fn isr_with_fault_plan() {
        let b = tiny();
        let scenes: Vec<SynthScene> = (0..4).map(|s| synth_scene_with_reference(s, 240, 120, 0.0)).collect();
        let plans = vec![FaultPlan::none(), FaultPlan::at_steps([2]), FaultPlan::none(), FaultPlan::none()];
        let base = SessionConfig::new(80, Strategy::Interleaved, HistoryDepth::One);
        let r = eval_isr(&b, &base, &scenes, &plans, false).unwrap();
        assert_eq!((r.n_samples, r.n_valid), (4, 3));
        assert_eq!(r, eval_isr(&b, &base, &scenes, &plans, true).unwrap());
    }

    #[test]
    fn rtf_definition() {
        let r = RtfReport::new(1.386, 5.6, 560, "x").unwrap();
        assert_eq!(r.rtf, 1.386 / 5.6);
        assert!(RtfReport::new(1.0, 0.0, 560, "x").is_err());
        let m = bench_rtf(&tiny(), &RtfConfig { duration_s: 0.56, repeats: 1, reference_ms: 200, ..RtfConfig::default() }).unwrap();
        assert_eq!(m.rtf, m.t_proc_s / m.t_speech_s);
        assert!((m.t_speech_s - 0.56).abs() < 1e-12);
    }

    #[test]
    fn cost_table_matches_closed_forms() {
        let t = ablate_cost(&tiny(), &[80, 560], &[Strategy::Interleaved, Strategy::Sequential, Strategy::RefOnly], 3, 2).unwrap();
        assert_eq!(t.rows.len(), 2 * 3 * 3);
        assert!(t.all_match());
        let seq = t.rows.iter().find(|r| r.strategy == "sequential" && r.m == 14 && r.t == 3).unwrap();
        assert_eq!(seq.arlm_recomputed, 56);
        assert!(t.rows.iter().filter(|r| r.strategy == "ref_only").all(|r| r.mix_positions == 0));
    }

    #[test]
    fn mutations_always_change_the_string() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let reference = streamtse_nn::Tensor2::filled(2, 4, 0.1);
        let mut l = build_prefix(&reference, Stage::Selm, Strategy::Interleaved, 2).unwrap();
        l.append_selm_step(1, &streamtse_nn::Tensor2::filled(2, 4, 0.2), &[3, 4]).unwrap();
        for _ in 0..50 {
            assert_ne!(mutate_elements(l.elements(), &mut rng), l.elements());
        }
    }
}
