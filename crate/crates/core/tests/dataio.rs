use std::f64::consts::PI;
use std::fs;
use std::sync::Arc;

use hybridcast::dataio::{
    last_value, load_csv, make_windows, seasonal_naive, synth_series, write_window_manifest, Scaler, SeriesTable,
    SplitRatio, SynthKind, SynthSpec,
};
use hybridcast::decomp::freq_seasonal;
use hybridcast::model::metrics;
use hybridcast::ndgrad::Tensor;
use hybridcast::Error;
use proptest::prelude::*;

const ETT_HEADER: &str = "date,HUFL,HULL,MUFL,MULL,LUFL,LULL,OT";

fn ett_csv(rows: usize) -> String {
    let mut s = format!("{ETT_HEADER}\n");
    for r in 0..rows {
        let (d, h) = (1 + r / 24, r % 24);
        let vals: Vec<String> = (0..7).map(|c| format!("{:.3}", (r * 7 + c) as f64 * 0.01)).collect();
        s.push_str(&format!("2016-07-{d:02} {h:02}:00:00,{}\n", vals.join(",")));
    }
    s
}

fn table(n: usize, m: usize) -> Arc<SeriesTable> {
    let values = (0..n * m).map(|i| i as f64).collect();
    Arc::new(SeriesTable::new((0..n as i64).collect(), values, (0..m).map(|c| format!("c{c}")).collect()).unwrap())
}

#[test]
fn ett_file_has_seven_channels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ETTh1.csv");
    fs::write(&path, ett_csv(48)).unwrap();
    let (t, report) = load_csv(&path).unwrap();
    assert_eq!(t.num_channels(), 7);
    assert_eq!(t.channels[6], "OT");
    assert_eq!((t.len(), report.rows_skipped), (48, 0));
    assert_eq!(t.timestamps[1] - t.timestamps[0], 3600);
    assert_eq!(t.value(1, 2), 0.09);
}

#[test]
fn weather_style_file_has_21_channels() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("weather.csv");
    let cols: Vec<String> = (0..21).map(|c| format!("v{c}")).collect();
    let mut s = format!("date,{}\n", cols.join(","));
    for r in 0..5 {
        s.push_str(&format!("2020-01-01 00:{:02}:00,{}\n", r * 10, vec!["1.5"; 21].join(",")));
    }
    fs::write(&path, s).unwrap();
    assert_eq!(load_csv(&path).unwrap().0.num_channels(), 21);
}

#[test]
fn malformed_rows_are_skipped_and_counted() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.csv");
    let text = "t,a,b\n1,1.0,2.0\n2,oops,2.0\n3,1.0\n4,NaN,1.0\n4,1.0,1.0\n3,1.0,1.0\n5,3.0,4.0\n";
    fs::write(&path, text).unwrap();
    let (t, report) = load_csv(&path).unwrap();
    assert_eq!(t.timestamps, vec![1, 4, 5]);
    assert_eq!(t.values, vec![1.0, 2.0, 1.0, 1.0, 3.0, 4.0]);
    assert_eq!((report.rows_read, report.rows_skipped), (7, 4));
}

#[test]
fn ingestion_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.csv");
    assert!(matches!(load_csv(&missing), Err(Error::Io { .. })));
    let empty = dir.path().join("empty.csv");
    fs::write(&empty, "t,a\n").unwrap();
    assert!(matches!(load_csv(&empty), Err(Error::Ingest { .. })));
    let narrow = dir.path().join("narrow.csv");
    fs::write(&narrow, "t\n1\n").unwrap();
    assert!(matches!(load_csv(&narrow), Err(Error::Ingest { .. })));
}

#[test]
fn ingestion_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ETTm1.csv");
    fs::write(&path, ett_csv(30)).unwrap();
    assert_eq!(load_csv(&path).unwrap().0, load_csv(&path).unwrap().0);
}

#[test]
fn split_examples() {
    assert_eq!(SplitRatio::ett().boundaries(100), [60, 80]);
    assert_eq!(SplitRatio::standard().boundaries(100), [70, 80]);
    let s = make_windows(table(100, 1), 1, 1, SplitRatio::ett()).unwrap();
    let sizes: Vec<usize> = s.all().iter().map(|d| d.end - d.start).collect();
    assert_eq!(sizes, vec![60, 20, 20]);
    assert!(SplitRatio::new(1.0, -1.0, 1.0).is_err());
    assert!(SplitRatio::new(0.0, 0.0, 0.0).is_err());
}

#[test]
fn window_count_example() {
    let s = make_windows(table(100, 2), 10, 5, SplitRatio::new(1.0, 0.0, 0.0).unwrap()).unwrap();
    assert_eq!(s.train.len(), 86);
    assert!(s.val.is_empty() && s.test.is_empty());
    let (x, y) = s.train.sample(85);
    assert_eq!(x.shape(), &[2, 10]);
    assert_eq!(y.shape(), &[2, 5]);
    assert_eq!(x.at(&[1, 0]), (85 * 2 + 1) as f64);
    assert_eq!(y.at(&[0, 4]), (99 * 2) as f64);
}

#[test]
fn benchmark_horizons_fit_ett_sized_tables() {
    for t in [96, 192, 336, 720] {
        let s = make_windows(table(17420, 1), 336, t, SplitRatio::ett()).unwrap();
        assert!(s.all().iter().all(|d| !d.is_empty()), "T={t}");
    }
    assert!(make_windows(table(10, 1), 8, 3, SplitRatio::ett()).is_err());
}

#[test]
fn manifest_lists_every_split() {
    let s = make_windows(table(100, 1), 10, 5, SplitRatio::ett()).unwrap();
    let mut buf = Vec::new();
    write_window_manifest(&s, &mut buf).unwrap();
    assert_eq!(
        String::from_utf8(buf).unwrap(),
        "split,start_row,end_row,windows\ntrain,0,60,46\nval,60,80,6\ntest,80,100,6\n"
    );
}

#[test]
fn scaler_uses_train_statistics_only() {
    let t = table(10, 1);
    let s = Scaler::fit(&t, 0, 4).unwrap();
    assert_eq!(s.mean, vec![1.5]);
    let z = s.transform(&t);
    assert!((z.values[0] + 1.5 / 1.25f64.sqrt()).abs() < 1e-12);
    assert!(Scaler::fit(&t, 3, 3).is_err());
}

#[test]
fn synth_is_deterministic() {
    for kind in [SynthKind::SineMix, SynthKind::TrendPlusSeason, SynthKind::NoiseWalk] {
        let a = synth_series(SynthSpec::new(kind), 3, 200, 9).unwrap();
        assert_eq!(a, synth_series(SynthSpec::new(kind), 3, 200, 9).unwrap());
        assert_ne!(a, synth_series(SynthSpec::new(kind), 3, 200, 10).unwrap());
    }
    assert_eq!("noise_walk".parse::<SynthKind>().unwrap(), SynthKind::NoiseWalk);
    assert!("sawtooth".parse::<SynthKind>().is_err());
}

/// Least-squares fit of `a + b t + c sin + d cos` at the given period.
fn fit_line_plus_sinusoid(y: &[f64], period: f64) -> [f64; 4] {
    let basis = |t: f64| [1.0, t, (2.0 * PI * t / period).sin(), (2.0 * PI * t / period).cos()];
    let mut a = [[0.0; 5]; 4];
    for (t, v) in y.iter().enumerate() {
        let b = basis(t as f64);
        for i in 0..4 {
            for j in 0..4 {
                a[i][j] += b[i] * b[j];
            }
            a[i][4] += b[i] * v;
        }
    }
    for c in 0..4 {
        let p = (c..4).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        for r in 0..4 {
            if r != c {
                let f = a[r][c] / a[c][c];
                let pivot = a[c];
                a[r].iter_mut().zip(pivot).skip(c).for_each(|(x, p)| *x -= f * p);
            }
        }
    }
    [0, 1, 2, 3].map(|i| a[i][4] / a[i][i])
}

#[test]
fn trend_plus_season_top1_recovers_sinusoid() {
    let spec = SynthSpec::new(SynthKind::TrendPlusSeason);
    let t = synth_series(spec, 2, 96, 4).unwrap();
    for c in 0..2 {
        let y = t.channel(c);
        let [_, _, s, k] = fit_line_plus_sinusoid(&y, 24.0);
        let amp = s.hypot(k);
        let truth: Vec<f64> = (0..96).map(|i| s * (2.0 * PI * i as f64 / 24.0).sin() + k * (2.0 * PI * i as f64 / 24.0).cos()).collect();
        let rec = freq_seasonal(&Tensor::new([1, 96], y).unwrap(), 1).unwrap();
        let rms = (rec.data().iter().zip(&truth).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 96.0).sqrt();
        assert!(rms < 0.02 * amp, "channel {c}: rms {rms} amp {amp}");
    }
}

#[test]
fn sine_mix_has_zero_mean() {
    let t = synth_series(SynthSpec::new(SynthKind::SineMix), 2, 200_000, 1).unwrap();
    for c in 0..2 {
        let mean = t.channel(c).iter().sum::<f64>() / t.len() as f64;
        assert!(mean.abs() < 1e-3, "{mean}");
    }
}

#[test]
fn baseline_examples() {
    let c = Tensor::full([2, 3, 12], 4.2);
    let target = Tensor::full([2, 3, 5], 4.2);
    assert_eq!(metrics(&last_value(&c, 5), &target).unwrap().0, 0.0);
    assert_eq!(metrics(&seasonal_naive(&c, 5, 6).unwrap(), &target).unwrap().0, 0.0);

    let s = 12;
    let wave = |t: usize| (2.0 * PI * t as f64 / s as f64).sin();
    let x = Tensor::from_fn([1, 1, 48], |i| wave(i[2]));
    let y = Tensor::from_fn([1, 1, 30], |i| wave(48 + i[2]));
    assert!(metrics(&seasonal_naive(&x, 30, s).unwrap(), &y).unwrap().0 < 1e-12);

    let ramp = Tensor::from_fn([1, 1, 10], |i| i[2] as f64);
    let future = Tensor::from_fn([1, 1, 4], |i| (10 + i[2]) as f64);
    assert!((metrics(&last_value(&ramp, 4), &future).unwrap().0 - 7.5).abs() < 1e-12);

    assert!(seasonal_naive(&x, 4, 0).is_err());
    assert!(seasonal_naive(&x, 4, 49).is_err());
}

proptest! {
    #[test]
    fn windows_stay_inside_their_split(n in 20usize..300, l in 1usize..20, t in 1usize..10, a in 1u8..8, b in 0u8..4, c in 1u8..4) {
        prop_assume!(n >= l + t);
        let ratio = SplitRatio::new(a as f64, b as f64, c as f64).unwrap();
        let s = make_windows(table(n, 1), l, t, ratio).unwrap();
        let [p, q] = ratio.boundaries(n);
        prop_assert_eq!((s.train.start, s.train.end, s.val.start, s.val.end, s.test.start, s.test.end), (0, p, p, q, q, n));
        for d in s.all() {
            let seg = d.end - d.start;
            prop_assert_eq!(d.len(), (seg + 1).saturating_sub(l + t));
            for i in 0..d.len() {
                let w = d.window_start(i);
                prop_assert!(w >= d.start && w + l + t <= d.end);
            }
        }
    }
}
