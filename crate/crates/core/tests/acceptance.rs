//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! `RIRCI_ACCEPTANCE_LOG=1` shows training progress on stderr.

use std::process::ExitCode;

use rirci_core::harness::{
    ablation_ordering, compositing_identity, determinism, gradient_suite, loss_oracle, metric_oracle,
    partition_example, receptive_field_probes, run_check, tiny_overfit, AblationOptions, CheckOutcome,
    OverfitOptions,
};

const SEED: u64 = 0;

/// Marks a passing check as failed when it overran its time limit.
fn within(mut outcome: CheckOutcome, limit_seconds: f64) -> CheckOutcome {
    if outcome.passed && outcome.seconds > limit_seconds {
        outcome.passed = false;
        outcome.detail = format!("{}; exceeded {limit_seconds:.0}s limit", outcome.detail);
    }
    outcome
}

fn tiny_overfit_check() -> CheckOutcome {
    let opts = OverfitOptions {
        seed: SEED,
        ..OverfitOptions::default()
    };
    let outcome = run_check("tiny overfit", || {
        let r = tiny_overfit(&opts)?;
        let last = r.last();
        let passed = last.psnr >= opts.target_psnr && r.gain_db() >= opts.margin_db && r.rmse_w_decreased();
        Ok((
            passed,
            format!(
                "{} samples at {}², {} steps: PSNR {:.2} dB (untrained {:.2}, gain {:.2}), RMSE_w {:.4} -> {:.4}",
                opts.samples,
                opts.size,
                r.steps,
                last.psnr,
                r.untrained.psnr,
                r.gain_db(),
                r.untrained.rmse_w.unwrap_or(f64::NAN),
                last.rmse_w.unwrap_or(f64::NAN),
            ),
        ))
    });
    within(outcome, 4.0 * 3600.0)
}

fn ablation_check() -> CheckOutcome {
    let opts = AblationOptions {
        seed: SEED,
        ..AblationOptions::default()
    };
    run_check("ablation ordering", || {
        let results = ablation_ordering(&opts)?;
        let psnr = |v: u8| results.iter().find(|r| r.variant == v).map(|r| r.validation.psnr).unwrap();
        let (dual, restore, imagine) = (psnr(0), psnr(3), psnr(4));
        let passed = dual >= restore - 0.2 && dual >= imagine - 0.2;
        Ok((
            passed,
            format!(
                "{} samples, {} steps each: dual {dual:.2} dB, restoration only {restore:.2} dB, imagination only {imagine:.2} dB",
                opts.samples, opts.steps
            ),
        ))
    })
}

fn main() -> ExitCode {
    if std::env::var_os("RIRCI_ACCEPTANCE_LOG").is_some() {
        let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    }
    let checks: Vec<Box<dyn Fn() -> CheckOutcome>> = vec![
        Box::new(|| within(compositing_identity(1000, SEED), 60.0)),
        Box::new(|| within(loss_oracle(50, SEED), 10.0)),
        Box::new(|| within(metric_oracle(50, SEED), 60.0)),
        Box::new(|| within(gradient_suite(SEED), 300.0)),
        Box::new(|| within(receptive_field_probes(SEED), 120.0)),
        Box::new(partition_example),
        Box::new(tiny_overfit_check),
        Box::new(ablation_check),
        Box::new(|| determinism(SEED)),
    ];
    let mut failed = 0;
    for check in &checks {
        let outcome = check();
        println!("{}", outcome.line());
        failed += usize::from(!outcome.passed);
    }
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
