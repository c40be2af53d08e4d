use hybridcast_web::{decompose_json, gate_json, spectrum_json, synth_values};
use serde_json::Value;

fn parse(s: String) -> Value {
    serde_json::from_str(&s).unwrap()
}

fn floats(v: &Value) -> Vec<f64> {
    v.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect()
}

#[test]
fn decomposition_reconstructs_input() {
    let x = synth_values("trend_plus_season", 96, 24.0, 0.01, 0.1, 3).unwrap();
    let d = parse(decompose_json(&x, 0.3, 2, &[5, 9]).unwrap());
    let (t, s) = (floats(&d["trend_ema"]), floats(&d["seasonal_ema"]));
    for i in 0..96 {
        assert!((t[i] + s[i] - x[i]).abs() < 1e-12);
    }
    assert_eq!(floats(&d["trend_multi_kernel"]).len(), 96);
    assert_eq!(floats(&d["seasonal_freq"]).len(), 96);
}

#[test]
fn spectrum_finds_the_period() {
    let x = synth_values("trend_plus_season", 96, 24.0, 0.0, 0.0, 1).unwrap();
    let s = parse(spectrum_json(&x, 1).unwrap());
    assert_eq!(s["top"], serde_json::json!([4]));
    assert_eq!(floats(&s["amplitudes"]).len(), 49);
}

#[test]
fn gate_rows_and_balance() {
    let g = parse(gate_json(&[2.0, 1.0, 0.0, -1.0, 0.0, 0.0, 3.0, 0.0], 4, 2).unwrap());
    let gates = floats(&g["gates"]);
    for row in gates.chunks(4) {
        assert_eq!(row.iter().filter(|v| **v != 0.0).count(), 2);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert_eq!(g["topk"], serde_json::json!([[0, 1], [2, 0]]));
    assert!(g["balance"].as_f64().unwrap() > 0.0);
}

#[test]
fn bad_inputs_are_errors() {
    assert!(decompose_json(&[], 0.3, 1, &[3]).is_err());
    assert!(decompose_json(&[1.0; 8], 1.5, 1, &[3]).is_err());
    assert!(spectrum_json(&[1.0; 8], 5).is_err());
    assert!(gate_json(&[1.0; 5], 4, 2).is_err());
    assert!(gate_json(&[1.0; 4], 4, 5).is_err());
    assert!(synth_values("sawtooth", 10, 24.0, 0.0, 0.0, 0).is_err());
}
