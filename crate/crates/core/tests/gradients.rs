//! Finite-difference checks of every tape operation, every loss, and the full
//! network, each on several shapes.

use tico::gradcheck::{check, max_relative_error, random_matrix, random_unit_rows, FD_STEP, FD_TOL};
use tico::linalg::Matrix;
use tico::losses::{self, LossKind};
use tico::model::{self, ArchitectureConfig, Bound, Parameters};
use tico::verify::{check_gradients, check_op_gradient, OP_KINDS};

const SHAPES: [(usize, usize); 4] = [(2, 2), (3, 5), (7, 4), (12, 9)];

#[test]
fn every_op_kind_on_several_shapes() {
    for op in OP_KINDS {
        for (k, &(n, d)) in SHAPES.iter().enumerate() {
            let r = check_op_gradient(op, n, d, 40 + k as u64).unwrap();
            assert!(r.pass, "{r}");
        }
    }
}

#[test]
fn every_loss_kind_on_several_shapes() {
    for kind in LossKind::ALL {
        for (k, &(n, d)) in SHAPES.iter().enumerate() {
            let r = check_gradients(kind, n, d, 90 + k as u64).unwrap();
            assert!(r.pass, "{r}");
        }
    }
}

#[test]
fn tico_through_normalization() {
    for &(n, d) in &SHAPES {
        let z2 = random_unit_rows(n, d, 3);
        let c = random_unit_rows(2 * n, d, 4).covariance().unwrap();
        check(&[random_matrix(n, d, 5)], |_, v| {
            losses::tico_loss_var(v[0].normalize_rows(1e-12), &z2, &c, 8.0)
        })
        .unwrap();
    }
}

#[test]
fn covariance_inside_the_graph() {
    // Loss with C = βC₀ + (1−β)ZᵀZ/n built on the tape, as the trainer does
    // when gradients flow through the covariance.
    let (n, d, beta, rho) = (6, 4, 0.9, 8.0);
    let c0 = random_unit_rows(10, d, 1).covariance().unwrap();
    let z2 = random_unit_rows(n, d, 2);
    check(&[random_unit_rows(n, d, 3)], |tape, v| {
        let z1 = v[0];
        let batch = z1.transpose().matmul(&z1)?.scale((1.0 - beta) / n as f64);
        let c = tape.constant(c0.scale(beta)).add(&batch)?;
        let quad = z1.matmul(&c)?.rowwise_dot(&z1)?.sum().scale(rho / n as f64);
        let align = z1.rowwise_dot(&tape.constant(z2.clone()))?.sum().scale(-1.0 / n as f64);
        align.add(&quad)
    })
    .unwrap();
}

fn tiny_arch() -> ArchitectureConfig {
    ArchitectureConfig {
        input_dim: 5,
        encoder_hidden_dims: vec![6],
        repr_dim: 4,
        projector_hidden_dim: 5,
        embed_dim: 3,
    }
}

#[test]
fn network_parameters_through_each_loss() {
    let arch = tiny_arch();
    let params = Parameters::init(&arch, 11).unwrap();
    let inputs: Vec<Matrix> = params.slices.iter().map(|s| s.value.clone()).collect();
    let x = random_matrix(6, arch.input_dim, 12);
    let z2 = random_unit_rows(6, arch.embed_dim, 13);
    let raw2 = random_matrix(6, arch.embed_dim, 14);
    let c = random_unit_rows(9, arch.embed_dim, 15).covariance().unwrap();

    for kind in LossKind::ALL {
        let err = max_relative_error(&inputs, FD_STEP, |tape, vars| {
            let bound = Bound { vars: vars.to_vec() };
            let xv = tape.constant(x.clone());
            match kind {
                LossKind::Barlow => losses::barlow_twins_var(model::project(&arch, &bound, xv)?, &raw2, 0.005),
                LossKind::Tico => losses::tico_loss_var(model::embed(&arch, &bound, xv)?, &z2, &c, 8.0),
                LossKind::Squared => losses::squared_contrastive_batch_var(model::embed(&arch, &bound, xv)?, &z2, 8.0),
                LossKind::Infonce => losses::infonce_var(model::embed(&arch, &bound, xv)?, &z2, 0.2),
            }
        })
        .unwrap();
        assert!(err < FD_TOL, "{}: {err:e}", kind.as_str());
    }
}
