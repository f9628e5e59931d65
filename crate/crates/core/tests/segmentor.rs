use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::thread;

use proptest::prelude::*;
use segrefine_core::mask::{Image, SoftMask};
use segrefine_core::scalar::sigmoid;
use segrefine_core::segmentor::bridge::serve_echo;
use segrefine_core::segmentor::{
    coord_gradient, oracle_logit, BridgeSegmentor, Capabilities, Oracle, OracleParams,
    PromptableSegmentor, SegmentorError,
};
use segrefine_core::select::{flip_polarity, PromptPoint, PromptSet};
use segrefine_core::{BinaryMask, LossKind};

fn uniform(w: usize, h: usize, v: f64) -> Image<f64> {
    Image::uniform(w, h, v).unwrap()
}

fn oracle() -> Oracle<f64> {
    Oracle::new(OracleParams::default()).unwrap()
}

#[test]
fn single_positive_peak_probability() {
    let img = uniform(64, 64, 0.5);
    let ps = PromptSet::new(vec![PromptPoint::positive(20.0, 30.0)]);
    let pred = oracle().predict(&img, &ps).unwrap();
    // logit = gamma * 1 = 4
    let expected = 1.0 / (1.0 + (-4.0f64).exp());
    assert!((pred.get(20, 30) - expected).abs() < 1e-12);
    assert!((pred.get(20, 30) - 0.9820).abs() < 1e-4);
}

#[test]
fn equidistant_pair_cancels() {
    let img = uniform(64, 64, 0.5);
    let ps = PromptSet::new(vec![
        PromptPoint::positive(10.0, 20.0),
        PromptPoint::negative(30.0, 20.0),
    ]);
    let pred = oracle().predict(&img, &ps).unwrap();
    assert!((pred.get(20, 20) - 0.5).abs() < 1e-12);
    assert!((pred.get(20, 5) - 0.5).abs() < 1e-12);
}

#[test]
fn far_field_reverts_to_image_term() {
    let img = uniform(200, 20, 0.5);
    let ps = PromptSet::new(vec![PromptPoint::positive(0.0, 0.0)]);
    let pred = oracle().predict(&img, &ps).unwrap();
    assert!((pred.get(199, 19) - 0.5).abs() < 1e-12);
}

#[test]
fn logit_closed_forms() {
    let params = OracleParams::default();
    let bright = uniform(8, 8, 1.0);
    assert!(
        (oracle_logit(&params, &bright, &PromptSet::default(), [3.0, 3.0]) - 1.0).abs() < 1e-15
    );
    let grey = uniform(64, 64, 0.5);
    let ps = PromptSet::new(vec![PromptPoint::positive(10.0, 10.0)]);
    let l = oracle_logit(&params, &grey, &ps, [22.0, 10.0]);
    assert!((l - 4.0 * (-0.5f64).exp()).abs() < 1e-12);
    assert!((l - 2.4261).abs() < 1e-4);
}

#[test]
fn logit_field_is_antisymmetric_under_flip() {
    let params = OracleParams::default();
    let img = Image::from_fn(32, 32, |x, y| ((x * 7 + y * 3) % 11) as f64 / 10.0).unwrap();
    let ps = PromptSet::new(vec![
        PromptPoint::positive(5.0, 8.0),
        PromptPoint::negative(20.0, 14.5),
    ]);
    let flipped = flip_polarity(&ps);
    let empty = PromptSet::default();
    for p in [[0.0, 0.0], [7.5, 9.25], [31.0, 12.0]] {
        let base = oracle_logit(&params, &img, &empty, p);
        let a = oracle_logit(&params, &img, &ps, p) - base;
        let b = oracle_logit(&params, &img, &flipped, p) - base;
        assert!((a + b).abs() < 1e-12);
    }
}

#[test]
fn logits_grid_agrees_with_pointwise_formula() {
    let params = OracleParams {
        sigma: 5.0,
        gamma: 3.0,
        beta: 1.5,
    };
    let img = Image::from_fn(20, 15, |x, y| ((x + 2 * y) % 9) as f64 / 8.0).unwrap();
    let ps = PromptSet::new(vec![
        PromptPoint::positive(4.5, 3.0),
        PromptPoint::negative(12.0, 9.5),
    ]);
    let grid = Oracle::new(params).unwrap().logits(&img, &ps);
    for y in 0..15 {
        for x in 0..20 {
            let direct = oracle_logit(&params, &img, &ps, [x as f64, y as f64]);
            assert!((grid[y * 20 + x] - direct).abs() < 1e-12);
        }
    }
}

#[test]
fn prediction_requires_a_positive_point() {
    let img = uniform(8, 8, 0.5);
    let negs = PromptSet::new(vec![PromptPoint::negative(1.0, 1.0)]);
    assert!(matches!(
        oracle().predict(&img, &negs),
        Err(SegmentorError::NoPositivePoints)
    ));
}

#[test]
fn far_point_has_negligible_gradient() {
    // target in one corner, point more than 6 sigma away from it and from the borders
    let img = uniform(240, 240, 0.5);
    let target = BinaryMask::from_fn(240, 240, |x, y| x < 10 && y < 10).unwrap();
    let ps = PromptSet::new(vec![PromptPoint::positive(160.0, 160.0)]);
    let g = coord_gradient(&oracle(), &img, &ps, &[0], &target, LossKind::FullBce).unwrap();
    let norm = (g.grads[0][0].powi(2) + g.grads[0][1].powi(2)).sqrt();
    assert!(norm < 1e-6, "gradient norm {norm}");
}

#[test]
fn symmetric_target_gives_zero_x_gradient() {
    let img = uniform(61, 41, 0.3);
    let target = BinaryMask::from_fn(61, 41, |x, y| {
        (20..=40).contains(&x) && (10..=30).contains(&y)
    })
    .unwrap();
    let ps = PromptSet::new(vec![PromptPoint::positive(30.0, 17.0)]);
    let g = coord_gradient(&oracle(), &img, &ps, &[0], &target, LossKind::FullBce).unwrap();
    assert!(g.grads[0][0].abs() < 1e-8);
    assert!(g.grads[0][1].abs() > 1e-6);
}

/// The oracle without its closed-form gradient, forcing the finite-difference path.
struct Opaque(Oracle<f64>);

impl PromptableSegmentor<f64> for Opaque {
    fn name(&self) -> String {
        "opaque".into()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::default()
    }

    fn predict(
        &self,
        image: &Image<f64>,
        prompts: &PromptSet<f64>,
    ) -> Result<SoftMask<f64>, SegmentorError> {
        self.0.predict(image, prompts)
    }
}

#[test]
fn finite_difference_path_tracks_analytic_gradient() {
    let img = Image::from_fn(40, 40, |x, y| ((x * 13 + y * 5) % 17) as f64 / 16.0).unwrap();
    let target =
        BinaryMask::from_fn(40, 40, |x, y| (8..25).contains(&x) && (12..30).contains(&y)).unwrap();
    let ps = PromptSet::new(vec![
        PromptPoint::positive(14.3, 20.8),
        PromptPoint::negative(30.0, 9.5),
        PromptPoint::positive(22.0, 27.1),
    ]);
    let exact = coord_gradient(&oracle(), &img, &ps, &[0, 2], &target, LossKind::FullBce).unwrap();
    let fd = coord_gradient(
        &Opaque(oracle()),
        &img,
        &ps,
        &[0, 2],
        &target,
        LossKind::FullBce,
    )
    .unwrap();
    assert_eq!(exact.loss, fd.loss);
    for (a, f) in exact.grads.iter().zip(&fd.grads) {
        // central differences at h = 0.5 px carry an O(h^2 / sigma^2) truncation error
        let norm = a[0].hypot(a[1]);
        for d in 0..2 {
            assert!((a[d] - f[d]).abs() <= 5e-3 * norm, "{a:?} vs {f:?}");
        }
    }
}

#[test]
fn one_sided_gradient_matches_differences() {
    let img = uniform(30, 30, 0.4);
    let target = BinaryMask::from_fn(30, 30, |x, _| x > 15).unwrap();
    let ps = PromptSet::new(vec![PromptPoint::positive(12.0, 14.0)]);
    let seg = oracle();
    let a = seg
        .loss_gradient(&img, &ps, &[0], &target, LossKind::OneSided)
        .unwrap();
    let f = segrefine_core::segmentor::finite_difference_gradient(
        &seg,
        &img,
        &ps,
        &[0],
        &target,
        LossKind::OneSided,
        1e-4,
    )
    .unwrap();
    assert!((a.grads[0][0] - f.grads[0][0]).abs() < 1e-6 * a.grads[0][0].abs().max(1e-8));
}

#[test]
fn f32_oracle_agrees_with_f64() {
    let img64 = Image::from_fn(24, 24, |x, y| ((x + y) % 5) as f64 / 4.0).unwrap();
    let ps64 = PromptSet::new(vec![
        PromptPoint::positive(10.0, 11.0),
        PromptPoint::negative(3.0, 20.0),
    ]);
    let img32: Image<f32> = img64.cast();
    let ps32: PromptSet<f32> = ps64
        .iter()
        .map(|p| PromptPoint::new(p.x as f32, p.y as f32, p.polarity))
        .collect();
    let a = oracle().predict(&img64, &ps64).unwrap();
    let b = Oracle::<f32>::new(OracleParams::default())
        .unwrap()
        .predict(&img32, &ps32)
        .unwrap();
    for (x, y) in a.values().iter().zip(b.values()) {
        assert!((x - *y as f64).abs() < 1e-5);
    }
}

proptest! {
    #[test]
    fn adding_points_is_monotone(
        base in proptest::collection::vec((0.0f64..31.0, 0.0f64..31.0, any::<bool>()), 1..5),
        extra in (0.0f64..31.0, 0.0f64..31.0),
        intensity in 0.0f64..1.0,
    ) {
        let img = uniform(32, 32, intensity);
        let mut pts: Vec<PromptPoint<f64>> = base
            .iter()
            .map(|&(x, y, p)| if p { PromptPoint::positive(x, y) } else { PromptPoint::negative(x, y) })
            .collect();
        pts.push(PromptPoint::positive(0.0, 0.0));
        let seg = oracle();
        let before = seg.predict(&img, &PromptSet::new(pts.clone())).unwrap();
        let mut more_pos = pts.clone();
        more_pos.push(PromptPoint::positive(extra.0, extra.1));
        let mut more_neg = pts.clone();
        more_neg.push(PromptPoint::negative(extra.0, extra.1));
        let up = seg.predict(&img, &PromptSet::new(more_pos)).unwrap();
        let down = seg.predict(&img, &PromptSet::new(more_neg)).unwrap();
        for i in 0..before.values().len() {
            prop_assert!(up.values()[i] >= before.values()[i]);
            prop_assert!(down.values()[i] <= before.values()[i]);
        }
        prop_assert_eq!(up.dims(), (32, 32));
        let again = seg.predict(&img, &PromptSet::new(pts)).unwrap();
        prop_assert_eq!(before, again);
    }
}

fn echo_server() -> (String, thread::JoinHandle<()>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let handle = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let reader = BufReader::new(stream.try_clone().unwrap());
        serve_echo(reader, stream).unwrap();
    });
    (addr, handle)
}

#[test]
fn bridge_round_trip_over_tcp() {
    let (addr, handle) = echo_server();
    let bridge = BridgeSegmentor::connect(&addr).unwrap();
    assert_eq!(bridge.backend(), "echo");
    assert!(!PromptableSegmentor::<f64>::capabilities(&bridge).analytic_gradient);
    let img = uniform(40, 30, 0.5);
    let ps = PromptSet::new(vec![
        PromptPoint::negative(2.0, 2.0),
        PromptPoint::positive(10.0, 12.0),
    ]);
    for _ in 0..20 {
        let m: SoftMask<f64> = bridge.predict(&img, &ps).unwrap();
        assert_eq!(m.dims(), (40, 30));
        let expected = sigmoid(4.0f64) as f32 as f64;
        assert_eq!(m.get(10, 12), expected);
        let d2: f64 = 15.0 * 15.0 + 3.0 * 3.0;
        let far = sigmoid(4.0 * (-d2 / 288.0).exp()) as f32 as f64;
        assert_eq!(m.get(25, 15), far);
    }
    assert!(matches!(
        bridge.predict(&img, &PromptSet::new(vec![PromptPoint::negative(1.0, 1.0)])),
        Err(SegmentorError::NoPositivePoints)
    ));
    // the finite-difference path works over the wire
    let target = BinaryMask::from_fn(40, 30, |x, _| x < 12).unwrap();
    let g = coord_gradient(&bridge, &img, &ps, &[1], &target, LossKind::FullBce).unwrap();
    assert!(g.grads[0][0].is_finite() && g.loss > 0.0);
    drop(bridge);
    handle.join().unwrap();
}

#[test]
fn bridge_reports_backend_errors_and_bad_ids() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let handle = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut w = stream.try_clone().unwrap();
        let mut lines = BufReader::new(stream).lines();
        lines.next().unwrap().unwrap();
        writeln!(w, r#"{{"backend":"flaky","version":"0.0.1"}}"#).unwrap();
        lines.next().unwrap().unwrap();
        writeln!(w, r#"{{"id":1,"ok":false,"error":"out of memory"}}"#).unwrap();
        lines.next().unwrap().unwrap();
        writeln!(w, r#"{{"id":99,"ok":false,"error":"late"}}"#).unwrap();
        lines.next().unwrap().unwrap();
        writeln!(w, "not json").unwrap();
    });
    let bridge = BridgeSegmentor::tcp(&addr).unwrap();
    assert_eq!(
        PromptableSegmentor::<f64>::name(&bridge),
        "bridge:flaky@0.0.1"
    );
    let img = uniform(4, 4, 0.5);
    let ps = PromptSet::new(vec![PromptPoint::positive(1.0, 1.0)]);
    let r: Result<SoftMask<f64>, _> = bridge.predict(&img, &ps);
    assert!(matches!(r, Err(SegmentorError::Backend(m)) if m == "out of memory"));
    let r: Result<SoftMask<f64>, _> = bridge.predict(&img, &ps);
    assert!(matches!(r, Err(SegmentorError::Protocol(_))));
    let r: Result<SoftMask<f64>, _> = bridge.predict(&img, &ps);
    assert!(matches!(r, Err(SegmentorError::Protocol(_))));
    handle.join().unwrap();
    let r: Result<SoftMask<f64>, _> = bridge.predict(&img, &ps);
    assert!(matches!(r, Err(SegmentorError::Transport(_))));
}

#[test]
fn echo_server_survives_malformed_lines() {
    let (addr, handle) = echo_server();
    let mut stream = TcpStream::connect(&addr).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let garbage = [
        "{",
        "[]",
        r#"{"op":"predict"}"#,
        r#"{"op":"predict","id":3,"image":{"w":2,"h":2,"enc":"b64f32","data":"AAAA"},"points":[]}"#,
        r#"{"op":"explode","id":4}"#,
    ];
    for g in garbage {
        writeln!(stream, "{g}").unwrap();
        let mut line = String::new();
        reader.read_line(&mut line).unwrap();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["ok"], false, "{g} -> {line}");
    }
    writeln!(stream, r#"{{"op":"hello"}}"#).unwrap();
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    assert!(line.contains("echo"));
    drop(stream);
    drop(reader);
    handle.join().unwrap();
}
