use std::ffi::{c_char, CStr, CString};
use std::ptr;

use paragon::adapterfarm::{compute_stats, AdapterCorpus, CorpusRecord, Provenance, TuneConfig};
use paragon::nn::TensorSpec;
use paragon::objectives::TaskWeights;
use paragon::paramgen::{train_generator, DenoiserConfig, GeneratorTrainConfig};
use paragon_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    unsafe {
        paragon_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn tiny_generator_dir() -> tempfile::TempDir {
    let p = 12;
    let records: Vec<CorpusRecord> = (0..5)
        .map(|i| {
            let a = i as f64 / 4.0;
            CorpusRecord {
                weights: TaskWeights::acc_div(a),
                seed: 0,
                values: (0..p).map(|j| (j as f64 * 0.1 + a) as f32).collect(),
            }
        })
        .collect();
    let stats = compute_stats(&records.iter().map(|r| r.values.clone()).collect::<Vec<_>>());
    let corpus = AdapterCorpus {
        manifest: vec![TensorSpec {
            name: "down.weight".into(),
            shape: vec![p],
        }],
        records,
        stats,
        provenance: Provenance {
            backbone_checksum: String::new(),
            tune: TuneConfig::default(),
            seed: 0,
        },
    };
    let den = DenoiserConfig {
        depth: 1,
        width: 16,
        token_width: 8,
        cond_width: 16,
        ..Default::default()
    };
    let train = GeneratorTrainConfig {
        steps: 3,
        batch_size: 4,
        diffusion_steps: 50,
        sample_steps: 10,
        ..Default::default()
    };
    let g = train_generator(&corpus, den, train).unwrap();
    let dir = tempfile::tempdir().unwrap();
    g.save(dir.path()).unwrap();
    dir
}

#[test]
fn generator_handle_lifecycle() {
    let dir = tiny_generator_dir();
    let path = CString::new(dir.path().to_str().unwrap()).unwrap();
    let mut g: *mut ParagonGenerator = ptr::null_mut();
    unsafe {
        assert_eq!(paragon_generator_load(path.as_ptr(), &mut g), ParagonStatus::Ok);
        assert!(!g.is_null());
        assert_eq!(paragon_generator_weight_len(g), 2);
        let n = paragon_generator_param_len(g);
        assert_eq!(n, 12);
        let w = [0.3, 0.7];
        let mut a = vec![0f32; n];
        let mut b = vec![0f32; n];
        assert_eq!(paragon_generator_sample(g, w.as_ptr(), 2, 0.4, 9, a.as_mut_ptr(), n), ParagonStatus::Ok);
        assert_eq!(paragon_generator_sample(g, w.as_ptr(), 2, 0.4, 9, b.as_mut_ptr(), n), ParagonStatus::Ok);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));

        let st = paragon_generator_sample(g, w.as_ptr(), 2, 0.4, 9, a.as_mut_ptr(), n - 1);
        assert_eq!(st, ParagonStatus::BufferTooSmall);
        assert!(last_error().contains("need 12"));

        let bad = [0.3, 0.3, 0.4];
        let st = paragon_generator_sample(g, bad.as_ptr(), 3, 0.4, 9, a.as_mut_ptr(), n);
        assert_ne!(st, ParagonStatus::Ok);
        assert!(!last_error().is_empty());

        let st = paragon_generator_sample(g, w.as_ptr(), 2, 3.0, 9, a.as_mut_ptr(), n);
        assert_eq!(st, ParagonStatus::InvalidArgument);
        paragon_generator_free(g);
        paragon_generator_free(ptr::null_mut());
    }
}

#[test]
fn load_errors() {
    let mut g: *mut ParagonGenerator = ptr::null_mut();
    let missing = CString::new("/nonexistent/paragon-generator").unwrap();
    unsafe {
        assert_eq!(paragon_generator_load(missing.as_ptr(), &mut g), ParagonStatus::Io);
        assert!(g.is_null());
        assert!(last_error().contains("nonexistent"));
        assert_eq!(paragon_generator_load(ptr::null(), &mut g), ParagonStatus::NullPointer);
        assert_eq!(paragon_generator_load(missing.as_ptr(), ptr::null_mut()), ParagonStatus::NullPointer);
        assert_eq!(paragon_generator_weight_len(ptr::null()), 0);
    }
}

#[test]
fn metrics_over_the_boundary() {
    let ranked = [4u32, 9, 2];
    let mut v = -1.0;
    unsafe {
        assert_eq!(paragon_ndcg_at_k(ranked.as_ptr(), 3, 9, 10, &mut v), ParagonStatus::Ok);
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert_eq!(paragon_ndcg_at_k(ranked.as_ptr(), 3, 7, 10, &mut v), ParagonStatus::Ok);
        assert_eq!(v, 0.0);
        assert_eq!(paragon_ndcg_at_k(ptr::null(), 3, 7, 10, &mut v), ParagonStatus::NullPointer);

        // two items covering disjoint categories: either order is ideal
        let y = [1.0, 0.0, 0.0, 1.0];
        let order = [1usize, 0];
        assert_eq!(paragon_alpha_ndcg_at_k(y.as_ptr(), 2, 2, order.as_ptr(), 2, 0.5, 10, &mut v), ParagonStatus::Ok);
        assert!((v - 1.0).abs() < 1e-12);
        let oob = [0usize, 5];
        let st = paragon_alpha_ndcg_at_k(y.as_ptr(), 2, 2, oob.as_ptr(), 2, 0.5, 10, &mut v);
        assert_eq!(st, ParagonStatus::InvalidArgument);
    }
}

#[test]
fn version_and_error_buffer() {
    let v = unsafe { CStr::from_ptr(paragon_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    let mut v = 0.0;
    unsafe {
        paragon_ndcg_at_k(ptr::null(), 1, 0, 1, &mut v);
        let full = paragon_last_error(ptr::null_mut(), 0);
        let mut small = [0 as c_char; 4];
        assert_eq!(paragon_last_error(small.as_mut_ptr(), 4), full);
        assert_eq!(CStr::from_ptr(small.as_ptr()).to_bytes().len(), 3);
    }
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/paragon.h")).unwrap();
    for f in [
        "paragon_last_error",
        "paragon_version",
        "paragon_generator_load",
        "paragon_generator_free",
        "paragon_generator_weight_len",
        "paragon_generator_param_len",
        "paragon_generator_sample",
        "paragon_ndcg_at_k",
        "paragon_alpha_ndcg_at_k",
        "PARAGON_STATUS_BUFFER_TOO_SMALL",
    ] {
        assert!(h.contains(f), "{f} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"paragon.h\"\nint main(void) { ParagonGenerator *g = 0; return paragon_generator_load(\"x\", &g) == PARAGON_STATUS_OK; }\n",
    )
    .unwrap();
    match std::process::Command::new(&cc).args(["-fsyntax-only", "-Wall", "-Werror", "-I", include]).arg(&src).status() {
        Ok(s) => assert!(s.success(), "{cc} rejected paragon.h"),
        Err(_) => eprintln!("no C compiler found; skipping header compile check"),
    }
}
