use iqc_tube_mpc::linalg::SymMatrix;
use iqc_tube_mpc::model::{build_delay_iqc, ConstraintSet, DisturbanceModel, LinearSystem};
use iqc_tube_mpc::synthesis::{minimize_tightening, DesignInputs, DesignOptions, MultiplierSpec};
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
    println!("elapsed: {:?}", t0.elapsed());
    println!("objective  = {:.6}  (reference 1.7772)", out.objective);
    println!("lmi margin = {:.3e}", out.lmi_margin);
    println!("c = {:?}", out.tube.c.as_slice());
    println!("P =\n{:.4}", out.tube.p.matrix());
    println!("M =\n{:.4}", out.multiplier.m.matrix());
    println!("X = {:.4}", out.x_iqc.unwrap().matrix()[(0, 0)]);
}
