//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ccq::coding::{decode_states, states_to_code};
use ccq::family::{Family, GroupGeometry};
use ccq::kernels::{dequant_then_dense, dequantize_tensor, gemv_batch, synthetic_packed, BENCH_M, BENCH_SHAPES};
use ccq::kernels::{report_from_csv, BenchOptions, VARIANT_DENSE, VARIANT_DEQUANT_DENSE, VARIANT_FUSED};
use ccq::metrics::{compression_summary, error_report};
use ccq::packing::{
    decode_container, encode_container, measured_bpw, pack_cluster_scales, pack_group, pack_tensor,
    read_container, unpack_cluster_scales, unpack_group, write_container, Checksums,
};
use ccq::quantizer::{optimize_scale, quantize_group, quantize_tensor, rtn_quantize, search_codes};
use ccq::{Matrix, QuantizerOptions};
use common::*;
use rand::Rng;

const FAMILIES: [Family; 3] = [Family::Bpw275, Family::Bpw25, Family::Bpw206];

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn codebook_equivalence() -> Outcome {
    let mut total = 0usize;
    for c in all_configs() {
        let book = codebook(c);
        check(book.len() == c.code_count() as usize, || format!("{c}: {} rows", book.len()))?;
        for (k, row) in book.rows().enumerate() {
            let decoded = decode_states(k as u32, &c).map_err(|e| e.to_string())?;
            check(decoded == row, || format!("{c}: code {k} decodes to {decoded:?}, codebook has {row:?}"))?;
            let back = states_to_code(row, &c).map_err(|e| e.to_string())?;
            check(back == k as u32, || format!("{c}: states {row:?} encode to {back}, expected {k}"))?;
        }
        total += book.len();
    }
    let fig = decode_states(2, &cfg(2, 3, 1)).map_err(|e| e.to_string())?;
    check(fig == [0, 1, 2], || format!("(2,3,1) code 2 decodes to {fig:?}"))?;
    Ok(format!("{total} codes over 5 configs agree; (2,3,1) code 2 -> [00,01,10]"))
}

fn bpw_exactness() -> Outcome {
    let expected = [2.75, 2.5, 2.0625];
    let mut parts = Vec::new();
    for (f, want) in FAMILIES.into_iter().zip(expected) {
        let m = Matrix::gaussian(4, 256, 3);
        let t = quantize_tensor(&m, &QuantizerOptions::new(f)).map_err(|e| e.to_string())?;
        let p = pack_tensor(&t).map_err(|e| e.to_string())?;
        let got = measured_bpw(&p).value();
        check(got == want, || format!("{f}: measured {got}, expected {want}"))?;
        parts.push(format!("{f}={got}"));
    }
    Ok(parts.join(" "))
}

/// Random stored words for one group, respecting the embedded tail layout.
fn random_group(rng: &mut impl Rng, geom: &GroupGeometry) -> (Vec<u16>, Option<u16>) {
    let f = geom.family;
    let layout = f.layout();
    let limit = 1u32 << f.storage_bits();
    let mut words: Vec<u16> = (0..geom.words).map(|_| rng.random_range(0..limit) as u16).collect();
    if geom.embedded_scale {
        let state = rng.random_range(0..=layout.weight_mask);
        *words.last_mut().unwrap() = (state << layout.weight_shifts[0]) as u16;
        let q = rng.random_range(0..=layout.scale_mask) as u16;
        (words, Some(q))
    } else {
        (words, None)
    }
}

fn round_trip() -> Outcome {
    let mut r = rng(11);
    for f in FAMILIES {
        let geom = GroupGeometry::new(f, 64).map_err(|e| e.to_string())?;
        for i in 0..10_000 {
            let (words, q) = random_group(&mut r, &geom);
            let packed = pack_group(&words, q, &geom).map_err(|e| e.to_string())?;
            let (w2, q2) = unpack_group(&packed, &geom).map_err(|e| e.to_string())?;
            check(w2 == words && q2 == q, || format!("{f} group {i}: unpack differs"))?;
            let again = pack_group(&w2, q2, &geom).map_err(|e| e.to_string())?;
            check(again == packed, || format!("{f} group {i}: repack differs"))?;
        }
    }
    let nibbles: Vec<u8> = (0..10_001).map(|_| r.random_range(0..16u8)).collect();
    let stream = pack_cluster_scales(&nibbles).map_err(|e| e.to_string())?;
    let back = unpack_cluster_scales(&stream, nibbles.len()).map_err(|e| e.to_string())?;
    check(back == nibbles, || "side-band nibble stream differs".into())?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for (i, f) in FAMILIES.into_iter().enumerate() {
        for seed in 0..3u64 {
            let m = Matrix::gaussian(6, 192, 100 + seed);
            let t = quantize_tensor(&m, &QuantizerOptions::new(f)).map_err(|e| e.to_string())?;
            let path = dir.path().join(format!("t{i}_{seed}.ccq"));
            write_container(&t, &path).map_err(|e| e.to_string())?;
            let back = read_container(&path).map_err(|e| e.to_string())?;
            check(back == t, || format!("{f} seed {seed}: container read differs"))?;
            let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
            let p = decode_container(&bytes, Checksums::Verify).map_err(|e| e.to_string())?;
            let re = encode_container(&p).map_err(|e| e.to_string())?;
            check(re == bytes, || format!("{f} seed {seed}: re-encoded container differs"))?;
        }
    }
    Ok("3 x 10^4 groups, 10^4 side-band nibbles and 9 containers round-trip".into())
}

fn search_optimality() -> Outcome {
    let mut r = rng(21);
    let mut total = 0;
    for c in all_configs() {
        let book = codebook(c);
        let zp = 1u32 << (c.state_bits() - 1);
        for i in 0..1000 {
            let sub = gaussian_vec(&mut r, c.states());
            let absmax = sub.iter().fold(0.0f32, |m, v| m.max(v.abs())) as f64;
            let scale = absmax / zp as f64 * r.random_range(0.5..1.5);
            let got = search_codes(&sub, scale, zp, &c);
            let want = oracle_search(&sub, scale, zp, &book);
            check(got == want, || format!("{c} case {i}: search {got}, oracle {want}"))?;
            total += 1;
        }
    }
    Ok(format!("{total} subvectors match the codebook oracle exactly"))
}

/// Centered states of a 64-weight (4,3,2) group: 21 full words and a 1-state tail.
fn centered_275(words: &[u16]) -> Vec<i32> {
    let c = cfg(4, 3, 2);
    let mut q = Vec::with_capacity(64);
    for &w in &words[..21] {
        q.extend(decode_states(w as u32, &c).unwrap().iter().map(|&s| s as i32 - 8));
    }
    q.push((words[21] >> 4) as i32 - 8);
    q
}

fn scale_optimization() -> Outcome {
    let mut r = rng(31);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let w = gaussian_vec(&mut r, 64);
        let q = centered_275(&quantize_group(&w, Family::Bpw275, 0).map_err(|e| e.to_string())?.words);
        let s = optimize_scale(&w, &q, 1.0);
        let norm = w.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        let grid = grid_search_scale(&w, &q, 0.0, norm, 10_000, 3);
        let rel = (s - grid).abs() / grid.max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        check(rel <= 1e-6, || format!("group {i}: closed form {s}, grid {grid}, rel {rel:e}"))?;
    }
    let mut r = rng(32);
    for i in 0..100 {
        let w = gaussian_vec(&mut r, 64);
        for f in FAMILIES {
            let errs: Vec<f64> = (0..=4)
                .map(|rounds| quantize_group(&w, f, rounds).map(|g| g.error))
                .collect::<Result<_, _>>()
                .map_err(|e| e.to_string())?;
            check(errs.windows(2).all(|p| p[1] <= p[0]), || {
                format!("{f} group {i}: error over rounds {errs:?}")
            })?;
        }
    }
    Ok(format!("max relative scale gap {worst:.2e}; error non-increasing over rounds 0..4"))
}

fn kernel_agreement() -> Outcome {
    let m = Matrix::gaussian(512, 512, 41);
    for f in FAMILIES {
        let t = quantize_tensor(&m, &QuantizerOptions::new(f)).map_err(|e| e.to_string())?;
        let p = pack_tensor(&t).map_err(|e| e.to_string())?;
        let k = dequantize_tensor(&p).map_err(|e| e.to_string())?;
        let q = t.reconstruct();
        let diff = k.data().iter().zip(q.data()).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
        check(diff == 0, || format!("{f}: {diff} elements differ"))?;
    }
    Ok("512x512 bit-identical for all three families".into())
}

fn accuracy_ordering() -> Outcome {
    let m = Matrix::gaussian(512, 512, 7);
    let rel = |r: &Matrix| error_report(&m, r, 64).map(|e| e.rel_frobenius).map_err(|e| e.to_string());
    let rtn = rel(&rtn_quantize(&m, 2, 64).map_err(|e| e.to_string())?)?;
    let mut parts = vec![format!("rtn2={rtn:.4}")];
    for f in [Family::Bpw275, Family::Bpw206] {
        let t = quantize_tensor(&m, &QuantizerOptions::new(f)).map_err(|e| e.to_string())?;
        let e = rel(&t.reconstruct())?;
        parts.push(format!("ccq{f}={e:.4} (margin {:.4})", rtn - e));
        check(e < rtn, || format!("{f}: {e} is not below rtn {rtn}"))?;
    }
    Ok(parts.join(" "))
}

fn gemv_correctness() -> Outcome {
    let mut worst = 0.0f64;
    let mut r = rng(51);
    for f in FAMILIES {
        for (i, &(rows, cols)) in BENCH_SHAPES.iter().enumerate() {
            let p = synthetic_packed(f, rows, cols, 64, 500 + i as u64).map_err(|e| e.to_string())?;
            let m_max = *BENCH_M.iter().max().unwrap();
            let xs: Vec<Vec<f32>> = (0..m_max).map(|_| gaussian_vec(&mut r, cols)).collect();
            for &m in &BENCH_M {
                let xr: Vec<&[f32]> = xs[..m].iter().map(|x| x.as_slice()).collect();
                let fused = gemv_batch(&p, &xr).map_err(|e| e.to_string())?;
                let reference = dequant_then_dense(&p, &xr).map_err(|e| e.to_string())?;
                for (a, b) in fused.iter().zip(&reference) {
                    let rel = rel_l2(a, b);
                    worst = worst.max(rel);
                    check(rel <= 1e-4, || format!("{f} {rows}x{cols} M={m}: relative error {rel:e}"))?;
                }
            }
        }
    }
    // a quantized (rather than synthetic) container as well
    let m = Matrix::gaussian(1024, 1024, 52);
    let t = quantize_tensor(&m, &QuantizerOptions::new(Family::Bpw275)).map_err(|e| e.to_string())?;
    let p = pack_tensor(&t).map_err(|e| e.to_string())?;
    let x = gaussian_vec(&mut r, 1024);
    let fused = gemv_batch(&p, &[&x]).map_err(|e| e.to_string())?;
    let reference = dequant_then_dense(&p, &[&x]).map_err(|e| e.to_string())?;
    let rel = rel_l2(&fused[0], &reference[0]);
    worst = worst.max(rel);
    check(rel <= 1e-4, || format!("quantized 1024x1024: relative error {rel:e}"))?;
    Ok(format!("max relative error {worst:.2e} over 4 shapes x M in {{1,4}} x 3 families"))
}

fn compression_accounting() -> Outcome {
    let m = Matrix::gaussian(512, 512, 61);
    let mut parts = Vec::new();
    for f in FAMILIES {
        let t = quantize_tensor(&m, &QuantizerOptions::new(f)).map_err(|e| e.to_string())?;
        let p = pack_tensor(&t).map_err(|e| e.to_string())?;
        let s = compression_summary(&p, (m.len() * 4) as u64).map_err(|e| e.to_string())?;
        let target = s.bpw / 32.0;
        let gap = (s.payload_ratio - target).abs() / target;
        check(gap <= 0.01, || format!("{f}: payload ratio {} vs {target}", s.payload_ratio))?;
        parts.push(format!(
            "{f}: payload {:.5} (saving {:.2}%), channel overhead {:.4} bpw",
            s.payload_ratio,
            100.0 * s.payload_saving,
            s.overhead_bpw
        ));
    }
    Ok(parts.join("; "))
}

fn bench_report() -> Outcome {
    let opts = BenchOptions {
        family: Family::Bpw206,
        group_size: 64,
        repeats: 1,
        seed: 0,
    };
    let (rows, csv) = ccq::cli::cmd_bench(&BENCH_SHAPES, &BENCH_M, &opts).map_err(|e| e.to_string())?;
    check(csv.starts_with("shape,M,variant,median_ms,bytes_read\n"), || "unexpected CSV header".into())?;
    let parsed = report_from_csv(&csv).map_err(|e| e.to_string())?;
    check(parsed.len() == BENCH_SHAPES.len() * BENCH_M.len() * 3, || format!("{} rows", parsed.len()))?;
    check(parsed.len() == rows.len(), || "CSV and rows disagree".into())?;
    let mut worst = 0.0f64;
    for &(r, c) in &BENCH_SHAPES {
        for &m in &BENCH_M {
            let shape = format!("{r}x{c}");
            let find = |v: &str| {
                parsed
                    .iter()
                    .find(|row| row.shape == shape && row.m == m && row.variant == v)
                    .map(|row| row.bytes_read)
                    .ok_or_else(|| format!("missing {shape} M={m} {v}"))
            };
            let dense = find(VARIANT_DENSE)?;
            find(VARIANT_DEQUANT_DENSE)?;
            let fused = find(VARIANT_FUSED)?;
            let ratio = fused as f64 / dense as f64;
            worst = worst.max(ratio);
            check(fused * 10 < dense, || format!("{shape} M={m}: fused {fused} vs dense {dense}"))?;
        }
    }
    Ok(format!("fused reads at most {:.4} of dense bytes", worst))
}

fn main() -> ExitCode {
    let criteria: [(&str, Duration, fn() -> Outcome); 10] = [
        ("codebook/shift equivalence", Duration::from_secs(1), codebook_equivalence),
        ("bpw exactness", Duration::from_secs(5), bpw_exactness),
        ("bit-exact round-trip", Duration::from_secs(10), round_trip),
        ("search optimality", Duration::from_secs(30), search_optimality),
        ("scale optimization", Duration::from_secs(30), scale_optimization),
        ("quantizer/kernel agreement", Duration::MAX, kernel_agreement),
        ("accuracy ordering", Duration::from_secs(120), accuracy_ordering),
        ("GEMV correctness", Duration::from_secs(60), gemv_correctness),
        ("compression accounting", Duration::MAX, compression_accounting),
        ("bench report", Duration::MAX, bench_report),
    ];
    let mut failed = 0;
    for (i, (name, budget, run)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(detail) if elapsed > budget => Err(format!("{detail}; took {elapsed:.2?}, budget {budget:?}")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} [{elapsed:.2?}]: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name} [{elapsed:.2?}]: {detail}", i + 1);
            }
        }
    }
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
