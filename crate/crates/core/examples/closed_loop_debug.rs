use iqc_tube_mpc::linalg::SymMatrix;
use iqc_tube_mpc::model::{
    build_delay_iqc, ConstraintSet, DelaySchedule, DelayUncertainty, DisturbanceModel,
    LinearSystem,
};
use iqc_tube_mpc::mpc::{Controller, InitMode, MpcConfig, TubeUpdateMode};
use iqc_tube_mpc::qcqp::SqpOptions;
use iqc_tube_mpc::sim::{closed_loop_run, DisturbancePolicy, RunOptions};
use iqc_tube_mpc::synthesis::{
    minimize_tightening, terminal_ingredients, DesignInputs, DesignOptions, MultiplierSpec,
};
use iqc_tube_mpc::tube::verify_containment;
use nalgebra::{DMatrix, DVector};

fn main() {
    let sys = LinearSystem::new(
        DMatrix::from_row_slice(2, 2, &[1.05, -0.3, 0.0, 0.95]),
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
        DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
        DMatrix::zeros(1, 2),
        DMatrix::zeros(1, 1),
        DMatrix::zeros(1, 1),
        DMatrix::identity(1, 1),
    )
    .unwrap();
    let (filt, family) = build_delay_iqc(2, 1).unwrap();
    let k = DMatrix::from_row_slice(1, 2, &[0.18, -0.35]);
    let dist = DisturbanceModel::new(SymMatrix::identity(1), 0.001).unwrap();
    let cons = ConstraintSet::new(
        DMatrix::from_row_slice(
            6,
            3,
            &[
                1.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 1.0, 0.0,
                0.0, -1.0,
            ],
        ),
        DVector::from_row_slice(&[0.4, 0.4, 0.2, 0.2, 0.1, 0.1]),
    )
    .unwrap();
    let spec = MultiplierSpec::DelayFamily(family);
    let inp = DesignInputs {
        sys: &sys,
        filt: &filt,
        k: &k,
        rho: 0.95,
        dist: &dist,
        constraints: &cons,
        multiplier: &spec,
    };
    let t0 = std::time::Instant::now();
    let out = minimize_tightening(
        &inp,
        &SymMatrix::from_diagonal(&[244.0]),
        244.0,
        &DesignOptions::default(),
    )
    .unwrap();
    println!("synthesis: {:?}, c = {:?}", t0.elapsed(), out.tube.c.as_slice());

    let q = SymMatrix::identity(2);
    let r = SymMatrix::identity(1);
    let k_om = DMatrix::from_row_slice(1, 2, &[0.19, -0.28]);
    let term = terminal_ingredients(
        &sys, &out.tube, &dist, &cons, &q, &r, &k_om, Some(0.1),
    )
    .unwrap();
    println!("terminal: x_omega = {:.6}, s_omega = {}", term.x_omega, term.s_omega);

    for (name, x0) in [
        ("boundary", DVector::from_row_slice(&[0.4, 0.2])),
        ("unstable-axis", DVector::from_row_slice(&[0.2, -0.05])),
    ] {
        let cfg = MpcConfig {
            sys: sys.clone(),
            filt: filt.clone(),
            tube: out.tube.clone(),
            terminal: term.clone(),
            constraints: cons.clone(),
            dist: dist.clone(),
            horizon: 25,
            q: q.clone(),
            r: r.clone(),
            s_cost: term.s_mat.clone(),
            update_mode: TubeUpdateMode::General,
            init_mode: InitMode::FreeInitialState,
            sqp: SqpOptions::default(),
        };
        let mut ctrl = Controller::new(cfg).unwrap();
        let unc = DelayUncertainty::new(2, DelaySchedule::SeededUniform { seed: 2024 }).unwrap();
        let t1 = std::time::Instant::now();
        let run = closed_loop_run(
            &sys,
            &unc,
            &mut ctrl,
            &x0,
            &RunOptions {
                n_steps: 50,
                seed: 11,
                policy: DisturbancePolicy::Uniform,
                record_predictions: vec![0],
            },
        );
        match run {
            Ok(trace) => {
                let viol = trace.max_constraint_violation(&cons);
                let cont = verify_containment(&trace, &out.tube);
                let pred = trace.records[0].predicted.as_ref().unwrap();
                let cand_ok = trace
                    .records
                    .iter()
                    .skip(1)
                    .all(|r| r.candidate_violation.unwrap_or(1.0) <= 1e-8);
                let costs: Vec<f64> = trace.records.iter().map(|r| r.cost).collect();
                let cost_dec = costs.windows(2).all(|w| w[1] <= w[0] + 1e-6);
                println!(
                    "[{name}] {:?} viol={:.3e} contain={} (min slack {:.3e}) sT0={:.4} cand_ok={} cost_dec={} x_final_norm={:.3e}",
                    t1.elapsed(),
                    viol,
                    cont.certified(),
                    cont.min_slack,
                    pred.s_seq[25],
                    cand_ok,
                    cost_dec,
                    trace.x_final.as_ref().unwrap().norm(),
                );
                println!(
                    "  statuses: opt={} subopt={}",
                    trace
                        .records
                        .iter()
                        .filter(|r| matches!(r.status, iqc_tube_mpc::mpc::SolveStatus::Optimal))
                        .count(),
                    trace
                        .records
                        .iter()
                        .filter(|r| matches!(
                            r.status,
                            iqc_tube_mpc::mpc::SolveStatus::FeasibleSuboptimal
                        ))
                        .count(),
                );
            }
            Err(e) => println!("[{name}] run failed: {e}"),
        }
    }
}
