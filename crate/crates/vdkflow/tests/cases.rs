use vdkflow::case::{load_case, parse_matpower, write_matpower};
use vdkflow_core::acpf::solve_acpf;
use vdkflow_core::kernels::{build_vdk, reduce_vdk};
use vdkflow_core::{AcpfOptions, BusKind, InjectionSample, LoadSpace};

fn path(name: &str) -> std::path::PathBuf {
    vdkflow::data_dir().join(name)
}

#[test]
fn bundled_cases_parse_with_expected_sizes() {
    // (file, buses, load buses or 0 to skip, reduced NNKs)
    for (name, buses, loads, reduced) in [
        ("case9.m", 9, 3, None),
        ("case14.m", 14, 11, None),
        ("case118.m", 118, 99, Some(97)),
        ("case_ACTIVSg500.m", 500, 0, Some(238)),
    ] {
        let net = load_case(&path(name)).unwrap();
        assert_eq!(net.n_buses(), buses, "{name}");
        if loads > 0 {
            assert_eq!(net.load_bus_indices.len(), loads, "{name}");
        }
        assert_eq!(net.buses.iter().filter(|b| b.kind == BusKind::Slack).count(), 1);
        let space = LoadSpace::new(&net);
        let r = reduce_vdk(&build_vdk(&net, &space));
        if let Some(n) = reduced {
            assert_eq!(r.active.len(), n, "{name}");
        }
    }
}

#[test]
fn bundled_cases_round_trip_and_solve() {
    for name in ["case9.m", "case14.m", "case118.m", "case_ACTIVSg500.m"] {
        let net = load_case(&path(name)).unwrap();
        let back = parse_matpower(&write_matpower(&net, "copy")).unwrap();
        assert_eq!(back, net, "{name}");
        let sol = solve_acpf(&net, &InjectionSample::base(&net), &AcpfOptions::default()).unwrap();
        assert!(sol.max_mismatch <= 1e-8, "{name}: {}", sol.max_mismatch);
        if name == "case_ACTIVSg500.m" {
            // its stored voltages come from a solve with reactive limits
            continue;
        }
        // the solved profile should sit close to the voltages stored in the file
        let worst = net
            .buses
            .iter()
            .zip(&sol.v_mag)
            .map(|(b, v)| (b.base_v_mag - v).abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.05, "{name}: |V| deviates {worst} from the case file");
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let e = load_case(&path("no_such_case.m")).unwrap_err();
    assert!(e.to_string().contains("no_such_case.m"));
}
