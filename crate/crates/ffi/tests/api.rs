use std::ffi::{CStr, CString};
use std::ptr;

use pairwise_cl::encoders::{save_checkpoint, EncoderSpec, ModelCheckpoint, MultiViewModel, ViewClassifier};
use pairwise_cl::Tensor;
use pairwise_cl_ffi::*;

fn last_error() -> Option<String> {
    let p = pcl_last_error();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
}

/// Brute-force pair loss: both directed NT-Xent terms summed, averaged over rows.
fn oracle_pair(a: &[Vec<f64>], b: &[Vec<f64>], tau: f64) -> f64 {
    let cos = |x: &[f64], y: &[f64]| {
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / (nx * ny).max(1e-8)
    };
    let directed = |u: &[Vec<f64>], v: &[Vec<f64>]| {
        let n = u.len();
        (0..n)
            .map(|k| {
                let denom: f64 = (0..n).map(|j| (cos(&u[k], &v[j]) / tau).exp()).sum();
                -((cos(&u[k], &v[k]) / tau).exp() / denom).ln()
            })
            .sum::<f64>()
            / n as f64
    };
    directed(a, b) + directed(b, a)
}

fn rows(flat: &[f64], d: usize) -> Vec<Vec<f64>> {
    flat.chunks(d).map(<[f64]>::to_vec).collect()
}

#[test]
fn pair_loss_matches_brute_force() {
    let (n, d) = (4, 3);
    let zi: Vec<f64> = (0..n * d).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
    let zj: Vec<f64> = (0..n * d).map(|i| ((i * 5 % 13) as f64 - 6.0) / 4.0).collect();
    for tau in [0.1, 0.5, 1.0] {
        let mut loss = f64::NAN;
        let s = unsafe { pcl_pair_loss(zi.as_ptr(), zj.as_ptr(), n, d, tau, &mut loss) };
        assert_eq!(s, PclStatus::Ok);
        let want = oracle_pair(&rows(&zi, d), &rows(&zj, d), tau);
        assert!((loss - want).abs() < 1e-9, "tau {tau}: {loss} vs {want}");
    }
}

#[test]
fn multiview_two_views_counts_both_orders() {
    let (n, d) = (5, 4);
    let packed: Vec<f64> = (0..2 * n * d).map(|i| ((i * 31 % 17) as f64 - 8.0) / 5.0).collect();
    let (mut mv, mut pair) = (0.0, 0.0);
    unsafe {
        assert_eq!(
            pcl_multiview_loss(packed.as_ptr(), 2, n, d, 0.5, &mut mv),
            PclStatus::Ok
        );
        assert_eq!(
            pcl_pair_loss(packed.as_ptr(), packed[n * d..].as_ptr(), n, d, 0.5, &mut pair),
            PclStatus::Ok
        );
    }
    assert!((mv - 2.0 * pair).abs() < 1e-12, "{mv} vs 2 x {pair}");
}

#[test]
fn invalid_temperature_and_null_output() {
    let z = [1.0, 0.0, 0.0, 1.0];
    let mut loss = 0.0;
    let s = unsafe { pcl_pair_loss(z.as_ptr(), z.as_ptr(), 2, 2, 0.0, &mut loss) };
    assert_eq!(s, PclStatus::InvalidArgument);
    assert!(last_error().unwrap().contains("emperature"), "{:?}", last_error());

    let s = unsafe { pcl_pair_loss(z.as_ptr(), z.as_ptr(), 2, 2, 0.5, ptr::null_mut()) };
    assert_eq!(s, PclStatus::NullPointer);
    let s = unsafe { pcl_pair_loss(ptr::null(), z.as_ptr(), 2, 2, 0.5, &mut loss) };
    assert_eq!(s, PclStatus::NullPointer);

    let s = unsafe { pcl_pair_loss(z.as_ptr(), z.as_ptr(), 2, 2, 0.5, &mut loss) };
    assert_eq!(s, PclStatus::Ok);
    assert!(last_error().is_none(), "success clears the message");
}

#[test]
fn pwcca_self_alignment() {
    let (n, d) = (60, 5);
    let x: Vec<f64> = (0..n * d)
        .map(|i| (((i * 2654435761usize) % 1000) as f64) / 500.0 - 1.0)
        .collect();
    let mut score = 0.0;
    assert_eq!(
        unsafe { pcl_pwcca(x.as_ptr(), n, d, x.as_ptr(), d, &mut score) },
        PclStatus::Ok
    );
    assert!((score - 1.0).abs() < 1e-6, "{score}");
}

#[test]
fn mann_whitney_small_exact() {
    let (a, b) = ([1.0, 2.0, 3.0], [4.0, 5.0, 6.0]);
    let (mut u, mut p, mut exact) = (-1.0, -1.0, -1);
    let s = unsafe { pcl_mann_whitney(a.as_ptr(), 3, b.as_ptr(), 3, &mut u, &mut p, &mut exact) };
    assert_eq!(s, PclStatus::Ok);
    assert_eq!(u, 0.0);
    assert!((p - 0.1).abs() < 1e-12);
    assert_eq!(exact, 1);

    let s = unsafe { pcl_mann_whitney(a.as_ptr(), 3, b.as_ptr(), 0, ptr::null_mut(), &mut p, ptr::null_mut()) };
    assert_ne!(s, PclStatus::Ok);
}

#[test]
fn mel_spectrogram_handle() {
    let sr = 16_000u32;
    let wave: Vec<f32> = (0..sr as usize)
        .map(|t| (2.0 * std::f32::consts::PI * 1000.0 * t as f32 / sr as f32).sin())
        .collect();
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { pcl_mel_spectrogram(wave.as_ptr(), wave.len(), sr, &mut m) },
        PclStatus::Ok
    );
    unsafe {
        let (r, c) = (pcl_matrix_rows(m), pcl_matrix_cols(m));
        assert_eq!(r, 64);
        assert!(c > 90 && c < 110, "{c} frames for 1 s");
        let data = std::slice::from_raw_parts(pcl_matrix_data(m), r * c);
        assert!(data.iter().all(|v| v.is_finite()));
        pcl_matrix_free(m);
        pcl_matrix_free(ptr::null_mut());
    }

    let mut m = ptr::null_mut();
    let s = unsafe { pcl_mel_spectrogram(wave.as_ptr(), 10, sr, &mut m) };
    assert_ne!(s, PclStatus::Ok);
    assert!(m.is_null());
}

#[test]
fn checkpoint_load_and_encode() {
    let dir = tempfile::tempdir().unwrap();
    let specs = vec![
        EncoderSpec::for_view("egemaps", vec![88]).unwrap(),
        EncoderSpec::for_view("spec", vec![16, 24]).unwrap(),
    ];
    let model = MultiViewModel::<f32>::new(specs.clone(), 5).unwrap();
    let ckpt = ModelCheckpoint::from_multiview(&model);
    let path = dir.path().join("m.pcl");
    save_checkpoint(&path, &ckpt).unwrap();

    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { pcl_checkpoint_load(cpath.as_ptr(), &mut h) }, PclStatus::Ok);
    unsafe {
        assert_eq!(pcl_checkpoint_view_count(h), 2);
        let names: Vec<String> = (0..2)
            .map(|i| {
                CStr::from_ptr(pcl_checkpoint_view_name(h, i))
                    .to_string_lossy()
                    .into_owned()
            })
            .collect();
        assert_eq!(names, ["egemaps", "spec"]);
        assert!(pcl_checkpoint_view_name(h, 2).is_null());
        assert_eq!(pcl_checkpoint_is_classifier(h), 0);

        let rows = 3;
        let x: Vec<f32> = (0..rows * 88).map(|i| ((i % 19) as f32 - 9.0) / 9.0).collect();
        let view = CString::new("egemaps").unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(
            pcl_checkpoint_encode(h, view.as_ptr(), x.as_ptr(), rows, 88, &mut m),
            PclStatus::Ok
        );
        let got = std::slice::from_raw_parts(pcl_matrix_data(m), pcl_matrix_rows(m) * pcl_matrix_cols(m)).to_vec();
        pcl_matrix_free(m);

        let direct = ViewClassifier::from_checkpoint(&ckpt, &specs[0], 2, 0)
            .unwrap()
            .representations(&Tensor::new(vec![rows, 88], x.clone()).unwrap())
            .unwrap();
        assert_eq!(got, direct.data());

        let mut m = ptr::null_mut();
        let s = pcl_checkpoint_encode(h, view.as_ptr(), x.as_ptr(), rows, 87, &mut m);
        assert_eq!(s, PclStatus::InvalidArgument);
        let unknown = CString::new("w2v2").unwrap();
        let s = pcl_checkpoint_encode(h, unknown.as_ptr(), x.as_ptr(), rows, 88, &mut m);
        assert_ne!(s, PclStatus::Ok);
        pcl_checkpoint_free(h);
    }

    let missing = CString::new(dir.path().join("nope.pcl").to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { pcl_checkpoint_load(missing.as_ptr(), &mut h) }, PclStatus::Io);
    assert!(last_error().unwrap().contains("nope.pcl"));
    assert_eq!(
        unsafe { pcl_checkpoint_load(ptr::null(), &mut h) },
        PclStatus::NullPointer
    );
}
