use kfs::diagnostics::{self, Toy, ToyConfig};
use kfs::nets::{DecoderKind, Params};

const TOL: f64 = 1e-8;

fn configs() -> Vec<ToyConfig> {
    vec![
        ToyConfig::default(),
        ToyConfig {
            classes: 3,
            per_class: 3,
            codes: 2,
            decoders: 3,
            image_shape: [1, 8, 8],
            decoder: DecoderKind::HighR,
            width: 6,
            depth: 2,
            seed: 11,
        },
    ]
}

#[test]
fn bias_closed_form_matches_enumeration() {
    for cfg in configs() {
        let rows = diagnostics::bias_rows(&Toy::build(&cfg).unwrap()).unwrap();
        assert!(diagnostics::worst(&rows) < TOL, "{cfg:?}: {:e}", diagnostics::worst(&rows));
    }
}

#[test]
fn real_index_sampling_is_unbiased() {
    for cfg in configs() {
        let rows = diagnostics::unbiased_rows(&Toy::build(&cfg).unwrap()).unwrap();
        assert!(diagnostics::worst(&rows) < TOL, "{cfg:?}");
    }
}

#[test]
fn variance_closed_form_matches_enumeration() {
    let toy = Toy::build(&ToyConfig::default()).unwrap();
    let rows = diagnostics::variance_rows(&toy, true).unwrap();
    let p = toy.model.num_params();
    assert_eq!(rows.len(), 1 + p + p * p);
    assert_eq!(rows[0].term, "trace");
    assert!(diagnostics::worst(&rows) < TOL, "{:e}", diagnostics::worst(&rows));
    let small = Toy::build(&configs()[1]).unwrap();
    assert!(diagnostics::worst(&diagnostics::variance_rows(&small, false).unwrap()) < TOL);
}

#[test]
fn end_to_end_loss_gradient_passes_finite_differences() {
    for c in diagnostics::gradcheck_suite(2).unwrap() {
        assert!(c.report.passes(1e-6), "{}: {:?}", c.name, c.report);
    }
}
