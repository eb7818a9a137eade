use std::sync::Arc;

use epochkey_core::abe::{setup, AbeBackend, ReferenceBackend};
use epochkey_core::ledger::{verify_bytes, ChainStatus, Ledger, MetadataRecord};
use epochkey_core::policy::{gen_policy, PolicyForm};
use epochkey_core::workflow::{Workflow, WorkflowConfig};
use epochkey_core::{ContentId, DataKey};

/// Coefficient of determination of the least-squares line through `pts`.
fn r_squared(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let icept = my - slope * mx;
    let ss_res: f64 = pts.iter().map(|(x, y)| (y - (icept + slope * x)).powi(2)).sum();
    let ss_tot: f64 = pts.iter().map(|(_, y)| (y - my).powi(2)).sum();
    1.0 - ss_res / ss_tot
}

#[test]
fn r_squared_oracle_sanity() {
    assert!((r_squared(&[(1.0, 2.0), (2.0, 4.0), (3.0, 6.0)]) - 1.0).abs() < 1e-12);
    assert!(r_squared(&[(1.0, 1.0), (2.0, 3.0), (3.0, 1.0)]) < 0.01);
}

#[test]
fn growth_is_linear_in_assets() {
    let policy = gen_policy(6, PolicyForm::AndOfOr, 5).unwrap();
    let mut pts = vec![];
    for m in [50usize, 100, 200] {
        let dir = tempfile::tempdir().unwrap();
        let backend: Arc<dyn AbeBackend> = Arc::new(ReferenceBackend::new(setup(Some(1)).unwrap()));
        let wf = Workflow::open(dir.path(), backend, WorkflowConfig::measured()).unwrap();
        let before = wf.ledger().size_bytes();
        for i in 0..m {
            let payload = (i as u64).to_le_bytes().repeat(128);
            wf.store("owner", &payload, &policy, 0).unwrap();
        }
        let after = wf.ledger().size_bytes();
        assert_eq!(wf.ledger().record_count(), m as u64);
        assert_eq!(std::fs::metadata(wf.ledger().path()).unwrap().len(), after);
        pts.push((m as f64, (after - before) as f64));
    }
    let r2 = r_squared(&pts);
    assert!(r2 > 0.99, "R^2 = {r2}");
}

#[test]
fn latest_ck_agrees_with_full_scan() {
    use rand::{Rng, SeedableRng};
    let ms = setup(Some(4)).unwrap();
    let backend = ReferenceBackend::new(ms);
    let base = gen_policy(3, PolicyForm::And, 1).unwrap();
    let cks: Vec<Vec<u8>> = (0..6)
        .map(|e| backend.encrypt(&base.attach_epoch(e).unwrap(), &DataKey([1; 32])).unwrap().to_bytes())
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let mut ledger = Ledger::open(dir.path().join("l.seg")).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
    let cids: Vec<ContentId> = (0..8u8).map(|i| ContentId::of(&[i])).collect();
    let mut ts = 0;
    for _ in 0..60 {
        let batch = (0..rng.gen_range(1..5))
            .map(|_| {
                ts += 1;
                let epoch = rng.gen_range(0..6u64);
                MetadataRecord {
                    cid: cids[rng.gen_range(0..cids.len())],
                    ck: cks[epoch as usize].clone(),
                    policy_id: base.id(),
                    epoch,
                    owner_id: "o".into(),
                    timestamp_us: ts,
                }
            })
            .collect();
        ledger.append(batch).unwrap();
    }
    // oracle: walk every record in order, keep the last one with the highest epoch
    let mut expected = std::collections::HashMap::new();
    for entry in ledger.entries().unwrap() {
        for r in entry.records {
            let keep = expected.get(&r.cid).is_none_or(|cur: &MetadataRecord| r.epoch >= cur.epoch);
            if keep {
                expected.insert(r.cid, r);
            }
        }
    }
    for cid in &cids {
        match expected.get(cid) {
            Some(rec) => assert_eq!(&ledger.latest_ck(cid).unwrap(), rec),
            None => assert!(ledger.latest_ck(cid).is_err()),
        }
    }
    let bytes = std::fs::read(ledger.path()).unwrap();
    assert_eq!(verify_bytes(&bytes), ChainStatus::Ok { entries: 60 });
}
