//! Revocation case study: revoke one contractor, roll the epoch, rotate CKs.

use std::collections::BTreeMap;
use std::time::Duration;

use epochkey_core::abe::UserAttributeKey;
use epochkey_core::cas::ContentId;
use epochkey_core::policy::{attribute_set, Policy};
use epochkey_core::workflow::{RotationSource, Workflow};

use super::{payload, Env, SMALL_PAYLOAD};
use crate::emit::{ExperimentResult, Table};
use crate::stats::Summary;
use crate::{Experiment, RunConfig};

pub const OBJECTS: usize = 30;
pub const MAINTENANCE_POLICY: &str = "(role=admin OR role=maintainer OR role=contractor) AND site=hq";
pub const REVOKED: &str = "carl_r_contract";
pub const PRINCIPALS: [(&str, [&str; 2]); 4] = [
    ("alice_admin", ["role=admin", "site=hq"]),
    ("bob_maint", ["role=maintainer", "site=hq"]),
    ("carl_r_contract", ["role=contractor", "site=hq"]),
    ("dana_other", ["role=visitor", "site=plantB"]),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub principal: String,
    pub attributes: String,
    pub before: usize,
    pub after: usize,
    pub attempts: usize,
}

#[derive(Debug, Clone)]
pub struct Report {
    pub rows: Vec<Row>,
    pub ck_updates: usize,
    pub ck_update: Summary,
    pub cas_objects_before_rotation: u64,
    pub cas_objects_after_rotation: u64,
    pub epoch_before: u64,
    pub epoch_after: u64,
}

impl Report {
    pub fn row(&self, principal: &str) -> Option<&Row> {
        self.rows.iter().find(|r| r.principal == principal)
    }

    pub fn new_cas_objects(&self) -> u64 {
        self.cas_objects_after_rotation - self.cas_objects_before_rotation
    }
}

fn successes(wf: &Workflow, uk: &UserAttributeKey, cids: &[ContentId], expected: &[Vec<u8>]) -> usize {
    cids.iter()
        .zip(expected)
        .filter(|(cid, data)| matches!(wf.try_retrieve(uk, cid).outcome, Ok(p) if &p == *data))
        .count()
}

pub fn run(cfg: &RunConfig) -> anyhow::Result<Report> {
    let mut env = Env::new(cfg, Experiment::Exp7)?;
    let policy = Policy::parse(MAINTENANCE_POLICY)?;
    let mut keys = BTreeMap::new();
    for (p, attrs) in PRINCIPALS {
        keys.insert(p.to_string(), env.authority.enroll(p, attribute_set(attrs)?)?);
    }
    let epoch_before = env.authority.current_epoch();
    let seed = cfg.sub_seed("exp7/data");
    let data: Vec<Vec<u8>> = (0..OBJECTS).map(|i| payload(seed.wrapping_add(i as u64), SMALL_PAYLOAD)).collect();
    let mut cids = Vec::with_capacity(OBJECTS);
    for d in &data {
        cids.push(env.workflow.store("plant_owner", d, &policy, epoch_before)?.cid);
    }

    let before: BTreeMap<String, usize> = keys
        .iter()
        .map(|(p, uk)| (p.clone(), successes(&env.workflow, uk, &cids, &data)))
        .collect();

    env.authority.revoke(REVOKED)?;
    let rollover = env.authority.rollover()?;
    // the revoked principal keeps the key it already holds
    for (p, uk) in rollover.keys {
        keys.insert(p, uk);
    }

    let cas_before = env.workflow.cas_stats()?.objects;
    let mut updates: Vec<Duration> = Vec::with_capacity(OBJECTS);
    for cid in &cids {
        let (_, d) = env
            .workflow
            .rotate_ck(cid, None, rollover.epoch, RotationSource::OwnerKeystore)?;
        updates.push(d);
    }
    let cas_after = env.workflow.cas_stats()?.objects;

    let rows = PRINCIPALS
        .iter()
        .map(|(p, attrs)| Row {
            principal: p.to_string(),
            attributes: attrs.join(" "),
            before: before[*p],
            after: successes(&env.workflow, &keys[*p], &cids, &data),
            attempts: OBJECTS,
        })
        .collect();
    env.check_chain()?;
    Ok(Report {
        rows,
        ck_updates: updates.len(),
        ck_update: Summary::of_durations_ms(&updates),
        cas_objects_before_rotation: cas_before,
        cas_objects_after_rotation: cas_after,
        epoch_before,
        epoch_after: rollover.epoch,
    })
}

impl Report {
    pub fn result(&self, cfg: &RunConfig) -> ExperimentResult {
        let mut t = Table::new(
            "exp7",
            &["principal", "attributes", "before_success", "after_success", "attempts"],
        );
        let mut plot = Table::new("exp7_success", &["principal", "before", "after"]);
        for r in &self.rows {
            t.push(vec![
                r.principal.as_str().into(),
                r.attributes.as_str().into(),
                r.before.into(),
                r.after.into(),
                r.attempts.into(),
            ]);
            plot.push(vec![r.principal.as_str().into(), r.before.into(), r.after.into()]);
        }
        ExperimentResult::new(Experiment::Exp7, cfg.mode, cfg.seed, t)
            .param("objects", OBJECTS)
            .param("policy", MAINTENANCE_POLICY)
            .param("revoked", REVOKED)
            .unit("before_success", "objects")
            .unit("after_success", "objects")
            .metric("ck_updates", self.ck_updates)
            .metric("mean_ck_update_ms", self.ck_update.mean)
            .metric("cas_objects_before_rotation", self.cas_objects_before_rotation)
            .metric("cas_objects_after_rotation", self.cas_objects_after_rotation)
            .metric("new_cas_objects", self.new_cas_objects())
            .metric("epoch_before", self.epoch_before)
            .metric("epoch_after", self.epoch_after)
            .with_table(plot)
    }
}
