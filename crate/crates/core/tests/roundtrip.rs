use nalgebra::convert;
use prnet_core::estimators::EstimatorConfig;
use prnet_core::geo::EcefPoint;
use prnet_core::ingest::{parse_epochs_csv, write_epochs_csv, MeasurementSet, SatObservation};
use prnet_core::labeling::{label_trace, read_label_dir, write_label_dir};
use prnet_core::prnet::{load_model, save_model, PrnetModel};
use prnet_core::simulator::{simulate_trace, ScenarioConfig};
use prnet_core::solver::wls_trace;

fn to_f32(e: &MeasurementSet<f64>) -> MeasurementSet<f32> {
    let p = |p: &EcefPoint<f64>| EcefPoint::new(p.x as f32, p.y as f32, p.z as f32);
    MeasurementSet {
        time_ms: e.time_ms,
        obs: e
            .obs
            .iter()
            .map(|o| SatObservation {
                svid: o.svid,
                pr_m: o.pr_m as f32,
                cn0_dbhz: o.cn0_dbhz as f32,
                sat_pos: p(&o.sat_pos),
                pr_sigma_m: o.pr_sigma_m as f32,
            })
            .collect(),
    }
}

#[test]
fn epochs_csv_is_bit_exact() {
    let tr = simulate_trace(&ScenarioConfig::urban_loop(30, 3.0, 10.0, 0.0, 21)).unwrap();
    let mut buf = Vec::new();
    write_epochs_csv(&mut buf, &tr.epochs).unwrap();
    assert_eq!(parse_epochs_csv(buf.as_slice()).unwrap(), tr.epochs);
}

#[test]
fn label_dir_round_trip() {
    let tr = simulate_trace(&ScenarioConfig::stationary(60, 1.0, 22)).unwrap();
    let data = label_trace(&tr.epochs, &tr.truth, &EstimatorConfig::default(), 10).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_label_dir(dir.path(), &data).unwrap();
    let back = read_label_dir(dir.path()).unwrap();
    assert_eq!(back.epochs, data.epochs);
    assert_eq!(back.len(), 50);
    assert_eq!(back.records().len(), 50 * tr.epochs[0].len());
}

#[test]
fn model_json_round_trip() {
    let model = PrnetModel::<f64>::new(40, 20, 99);
    let mut buf = Vec::new();
    save_model(&mut buf, &model).unwrap();
    let back: PrnetModel<f64> = load_model(buf.as_slice()).unwrap();
    assert_eq!(back, model);
    assert_eq!(back.param_count(), 31881);
}

#[test]
fn single_precision_wls() {
    let tr = simulate_trace(&ScenarioConfig::stationary(20, 0.0, 23)).unwrap();
    let narrow: Vec<MeasurementSet<f32>> = tr.epochs.iter().map(to_f32).collect();
    let wide = wls_trace(&tr.epochs).unwrap();
    let single = wls_trace(&narrow).unwrap();
    for ((a, _), (b, _)) in wide.iter().zip(&single) {
        let bx: [f64; 3] = [convert(b.pos.x), convert(b.pos.y), convert(b.pos.z)];
        let d = ((a.pos.x - bx[0]).powi(2) + (a.pos.y - bx[1]).powi(2) + (a.pos.z - bx[2]).powi(2))
            .sqrt();
        // pseudoranges near 2e7 m carry ~1 m of f32 rounding
        assert!(d < 50.0, "f32 solution off by {d} m");
    }
}
