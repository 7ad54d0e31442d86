use std::path::PathBuf;

use kinetic_gpc::collision::KernelFamily;
use kinetic_gpc::harness::Config;
use kinetic_gpc::kinetic_solver::{run, Scheme};

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

const MINIMAL: &str = r#"{
  "version": 1,
  "kernel": { "family": "constant", "params": [2.0], "sigma_min": 2.0, "sigma_max": 2.0 },
  "epsilon": 0.1, "nx": 8, "nv": 6, "k_gpc": 2, "t_end": 0.01
}"#;

#[test]
fn shipped_configs_parse() {
    for name in [
        "default.json",
        "defect_seed.json",
        "z_independent.json",
        "constant_limit.json",
        "affine_limit.json",
        "invalid_affine.json",
        "misdeclared_sigma_min.json",
    ] {
        let cfg = Config::load(&config(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        cfg.scenario().unwrap();
    }
}

#[test]
fn defaults_fill_optional_fields() {
    let cfg = Config::from_json(MINIMAL).unwrap();
    assert_eq!(cfg.cfl, 0.45);
    assert_eq!(cfg.diag_every, 1);
    assert_eq!(cfg.scheme, Scheme::MicroMacroSg);
    assert_eq!(cfg.k_list(), vec![2, 4, 6, 8, 10, 12]);
    assert_eq!(cfg.q_ref(), 40);
    let sc = cfg.scenario().unwrap();
    assert_eq!(sc.kernel.family, KernelFamily::Constant { sigma0: 2.0 });
    assert_eq!(sc.init.c0, 1.0);
}

#[test]
fn unknown_keys_and_versions_are_rejected() {
    let extra = MINIMAL.replacen("\"version\": 1,", "\"version\": 1, \"bogus\": 3,", 1);
    assert_eq!(Config::from_json(&extra).unwrap_err().exit_code(), 2);
    let v2 = MINIMAL.replacen("\"version\": 1", "\"version\": 2", 1);
    assert_eq!(Config::from_json(&v2).unwrap_err().exit_code(), 2);
    assert_eq!(Config::from_json("{").unwrap_err().exit_code(), 2);
}

#[test]
fn bad_kernels_are_rejected() {
    let wrong_arity = MINIMAL.replacen("[2.0]", "[2.0, 1.0]", 1);
    assert!(Config::from_json(&wrong_arity).unwrap().scenario().is_err());
    let bad_bounds = MINIMAL.replacen("\"sigma_min\": 2.0", "\"sigma_min\": 3.0", 1);
    assert!(Config::from_json(&bad_bounds).unwrap().scenario().is_err());
}

#[test]
fn non_positive_affine_kernel_fails_validation() {
    let cfg = Config::load(&config("invalid_affine.json")).unwrap();
    let sc = cfg.scenario().unwrap();
    let err = run(&sc, cfg.scheme, sc.t_end).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn scheme_tags_round_trip() {
    for s in [
        Scheme::MicroMacroSg,
        Scheme::MicroMacroColloc { z: 0.25 },
        Scheme::ResolvedColloc { z: -0.5 },
    ] {
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<Scheme>(&text).unwrap(), s);
    }
}
