//! The detect-rewrite loop: campaign, aggregate, fix, repeat until no slot
//! is flagged, then re-verify with fresh inputs and a fresh seed.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::asm::Program;
use crate::leakage::ModelConfig;
use crate::rewrite::{fix_iteration, LogEntry, RewriteLog};
use crate::tvla::{random_inputs, run_campaign, CampaignError, CampaignSpec, InputBinding, SlotReport, TTestReport, DEFAULT_THRESHOLD};

/// Two-sided 97.5% quantile of Student's t with 9 degrees of freedom.
const T_975_DF9: f64 = 2.262;

/// Input sets drawn per count in [`leak_trend`].
pub const TREND_REPEATS: usize = 10;

const VERIFY_SEED: u64 = 0x5eed_0f_7e57;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FixedInputs {
    /// This many inputs drawn from the seed.
    Count(usize),
    List(Vec<Vec<u8>>),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("max iterations must be at least 1")]
    NoIterations,
    #[error("no fixed inputs")]
    NoInputs,
    #[error(transparent)]
    Campaign(#[from] CampaignError),
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub program: Program,
    pub binding: InputBinding,
    pub model: ModelConfig,
    /// Traces per fixed input during fixing.
    pub traces: usize,
    /// Traces per fixed input for the final check; 0 skips it.
    pub verify_traces: usize,
    pub fixed_inputs: FixedInputs,
    pub max_iterations: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl PipelineConfig {
    pub fn new(program: Program, binding: InputBinding) -> Self {
        PipelineConfig {
            program,
            binding,
            model: ModelConfig::default(),
            traces: 10_000,
            verify_traces: 100_000,
            fixed_inputs: FixedInputs::Count(1),
            max_iterations: 20,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
        }
    }

    fn fixing_inputs(&self) -> Vec<Vec<u8>> {
        match &self.fixed_inputs {
            FixedInputs::Count(k) => random_inputs(self.binding.input_len, *k, self.seed),
            FixedInputs::List(list) => list.clone(),
        }
    }

    fn spec(&self, program: Program, inputs: Vec<Vec<u8>>, traces: usize, seed: u64) -> CampaignSpec {
        CampaignSpec {
            n_traces: traces,
            threshold: self.threshold,
            seed,
            ..CampaignSpec::new(program, self.binding.clone(), dedup(inputs))
        }
    }
}

fn dedup(inputs: Vec<Vec<u8>>) -> Vec<Vec<u8>> {
    let mut seen = HashSet::new();
    inputs.into_iter().filter(|i| seen.insert(i.clone())).collect()
}

/// As many inputs as `avoid` holds, none of them in `avoid`. Falls back to
/// repeats once the input space is exhausted.
fn fresh_inputs(len: usize, avoid: &[Vec<u8>], seed: u64) -> Vec<Vec<u8>> {
    let avoid: HashSet<&Vec<u8>> = avoid.iter().collect();
    let want = avoid.len().max(1);
    let space = if len >= 8 { usize::MAX } else { 1usize << (8 * len) };
    let mut out = Vec::new();
    let mut round = 0;
    while out.len() < want && round < 64 {
        for x in random_inputs(len, want, seed.wrapping_add(round)) {
            let exhausted = avoid.len() + out.len() >= space;
            if out.len() < want && (exhausted || !avoid.contains(&x)) {
                out.push(x);
            }
        }
        round += 1;
    }
    out
}

/// One detect-rewrite round.
#[derive(Debug, Clone)]
pub struct Iteration {
    /// Program the campaign ran on.
    pub program: Program,
    pub flagged: usize,
    pub report: TTestReport,
    /// Rules applied to `program`, highest index first.
    pub log: Vec<LogEntry>,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub final_program: Program,
    /// Flagged slots per campaign, starting with the original program.
    pub flagged_history: Vec<usize>,
    pub iterations: Vec<Iteration>,
    pub log: RewriteLog,
    /// Verification report, or the last fixing report when verification is off.
    pub final_report: TTestReport,
    pub remaining: Vec<SlotReport>,
    pub fixing_inputs: Vec<Vec<u8>>,
    pub verify_inputs: Vec<Vec<u8>>,
    pub instructions_before: usize,
    pub instructions_after: usize,
}

impl PipelineResult {
    pub fn overhead_ratio(&self) -> f64 {
        self.instructions_after as f64 / self.instructions_before.max(1) as f64
    }

    pub fn converged(&self) -> bool {
        self.flagged_history.last() == Some(&0)
    }

    pub fn summary(&self) -> String {
        let history: Vec<String> = self.flagged_history.iter().map(|n| n.to_string()).collect();
        format!(
            "instructions_before = {}\ninstructions_after = {}\noverhead_ratio = {:.4}\nflagged_before = {}\n\
             flagged_history = {}\nrewrite_iterations = {}\nfixpoint_reached = {}\ninserted = {}\n\
             verify_inputs = {}\nremaining = {}\nfinal_max_abs_t = {:.3}\n",
            self.instructions_before,
            self.instructions_after,
            self.overhead_ratio(),
            self.flagged_history.first().copied().unwrap_or(0),
            history.join(","),
            self.log.iterations,
            self.log.fixpoint_reached,
            self.log.inserted_total(),
            self.verify_inputs.len(),
            self.remaining.len(),
            self.final_report.max_abs_t(),
        )
    }
}

pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineResult, PipelineError> {
    if config.max_iterations == 0 {
        return Err(PipelineError::NoIterations);
    }
    let fixing_inputs = config.fixing_inputs();
    if fixing_inputs.is_empty() {
        return Err(PipelineError::NoInputs);
    }
    let mut program = config.program.clone();
    let mut iterations = Vec::new();
    let mut history = Vec::new();
    let mut log = RewriteLog::default();
    let last_report = loop {
        let spec = config.spec(program.clone(), fixing_inputs.clone(), config.traces, config.seed);
        let report = run_campaign(&spec, &config.model)?;
        let flagged = report.flagged_count();
        history.push(flagged);
        if flagged == 0 {
            log.fixpoint_reached = true;
            break report;
        }
        if log.iterations == config.max_iterations {
            break report;
        }
        let (next, entries) = fix_iteration(&program, &report);
        log.entries.extend(entries.iter().cloned());
        let stuck = next == program;
        iterations.push(Iteration {
            program: std::mem::replace(&mut program, next),
            flagged,
            report: report.clone(),
            log: entries,
        });
        if stuck {
            break report;
        }
        log.iterations += 1;
    };

    let (final_report, verify_inputs) = if config.verify_traces > 0 {
        let inputs = fresh_inputs(config.binding.input_len, &fixing_inputs, config.seed ^ VERIFY_SEED);
        let spec = config.spec(program.clone(), inputs.clone(), config.verify_traces, config.seed ^ VERIFY_SEED);
        (run_campaign(&spec, &config.model)?, inputs)
    } else {
        (last_report, Vec::new())
    };
    let remaining = final_report.flagged().cloned().collect();
    Ok(PipelineResult {
        instructions_before: config.program.len(),
        instructions_after: program.len(),
        final_program: program,
        flagged_history: history,
        iterations,
        log,
        final_report,
        remaining,
        fixing_inputs,
        verify_inputs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrendRow {
    pub n_inputs: usize,
    pub mean: f64,
    /// Half-width of the 95% confidence interval.
    pub ci95: f64,
    pub samples: Vec<usize>,
}

/// Flagged-slot counts on the unmodified program as the number of fixed
/// inputs grows. Each count is repeated [`TREND_REPEATS`] times; repeat `r`
/// uses the same campaign seed for every count. With an explicit input list
/// the inputs are drawn from that list.
pub fn leak_trend(config: &PipelineConfig, counts: &[usize]) -> Result<Vec<TrendRow>, PipelineError> {
    counts
        .iter()
        .map(|&n| {
            let mut samples = Vec::with_capacity(TREND_REPEATS);
            for r in 0..TREND_REPEATS as u64 {
                if n == 0 {
                    samples.push(0);
                    continue;
                }
                let seed = config.seed.wrapping_add(r);
                let inputs = match &config.fixed_inputs {
                    FixedInputs::List(pool) => {
                        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ n as u64);
                        (0..n).map(|_| pool.choose(&mut rng).cloned().ok_or(PipelineError::NoInputs)).collect::<Result<_, _>>()?
                    }
                    FixedInputs::Count(_) => random_inputs(config.binding.input_len, n, seed.wrapping_mul(1_000_003).wrapping_add(n as u64)),
                };
                let spec = config.spec(config.program.clone(), inputs, config.traces, seed);
                samples.push(run_campaign(&spec, &config.model)?.flagged_count());
            }
            let (mean, ci95) = mean_ci(&samples);
            Ok(TrendRow {
                n_inputs: n,
                mean,
                ci95,
                samples,
            })
        })
        .collect()
}

fn mean_ci(samples: &[usize]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<usize>() as f64 / n;
    if samples.len() < 2 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, T_975_DF9 * (var / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_of_constant_samples_is_zero() {
        assert_eq!(mean_ci(&[3; 10]), (3.0, 0.0));
    }

    #[test]
    fn ci_hand_value() {
        // mean 4.5, sample sd sqrt(55/6)
        let s: Vec<usize> = (0..10).collect();
        let (m, h) = mean_ci(&s);
        assert_eq!(m, 4.5);
        assert!((h - 2.262 * (55.0f64 / 6.0 / 10.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn fresh_inputs_avoid_fixing_set() {
        let used = random_inputs(2, 5, 1);
        let fresh = fresh_inputs(2, &used, 2);
        assert_eq!(fresh.len(), 5);
        assert!(fresh.iter().all(|f| !used.contains(f)));
    }

    #[test]
    fn dedup_keeps_first_occurrence() {
        assert_eq!(dedup(vec![vec![1], vec![2], vec![1]]), [vec![1], vec![2]]);
    }
}
