//! The dynamic discriminator pool.
//!
//! Head groups live in compartments keyed by `(t*, scale, conditioning)`.
//! Training checks groups out by moving them out of their slot, and releases
//! them by moving them back; refresh only ever touches groups that are in
//! their slot, so a checked-out group cannot be re-initialized mid-update.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::checkpoint::{decode_tensor, encode_params, read_json, to_json_pretty, write_atomic, BlobEntry, BLOB_FILE};
use crate::models::{init_head, DiscriminatorHead, HeadRecipe, HeadSpec, ParamSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Global,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Conditioning {
    Conditional,
    Unconditional,
}

/// A `(scale, conditioning)` pair: one discrimination task type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskType {
    pub scale: Scale,
    pub conditioning: Conditioning,
}

impl TaskType {
    pub const GLOBAL_COND: Self = Self { scale: Scale::Global, conditioning: Conditioning::Conditional };
    pub const GLOBAL_UNCOND: Self = Self { scale: Scale::Global, conditioning: Conditioning::Unconditional };
    pub const LOCAL_COND: Self = Self { scale: Scale::Local, conditioning: Conditioning::Conditional };
    pub const LOCAL_UNCOND: Self = Self { scale: Scale::Local, conditioning: Conditioning::Unconditional };

    pub fn is_conditional(&self) -> bool {
        self.conditioning == Conditioning::Conditional
    }

    /// Short column-friendly name, e.g. `global_cond`.
    pub fn tag(&self) -> &'static str {
        match (self.scale, self.conditioning) {
            (Scale::Global, Conditioning::Conditional) => "global_cond",
            (Scale::Global, Conditioning::Unconditional) => "global_uncond",
            (Scale::Local, Conditioning::Conditional) => "local_cond",
            (Scale::Local, Conditioning::Unconditional) => "local_uncond",
        }
    }
}

/// Which task types a pool holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolLayout {
    /// Global conditional, local conditional, local unconditional (1:2 global:local).
    MultiScaleDual,
    /// Point data has no patches: global conditional and global unconditional.
    PointDual,
    /// A single global conditional compartment per `t*`.
    GlobalOnly,
}

impl PoolLayout {
    pub fn task_types(&self) -> &'static [TaskType] {
        match self {
            Self::MultiScaleDual => &[TaskType::GLOBAL_COND, TaskType::LOCAL_COND, TaskType::LOCAL_UNCOND],
            Self::PointDual => &[TaskType::GLOBAL_COND, TaskType::GLOBAL_UNCOND],
            Self::GlobalOnly => &[TaskType::GLOBAL_COND],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CompartmentKey {
    pub t_star: usize,
    pub task: TaskType,
}

impl CompartmentKey {
    pub fn new(t_star: usize, scale: Scale, conditioning: Conditioning) -> Self {
        Self { t_star, task: TaskType { scale, conditioning } }
    }
}

impl std::fmt::Display for CompartmentKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "t{}/{}", self.t_star, self.task.tag())
    }
}

/// L heads, one per feature level, acting as one discriminator.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGroup {
    id: u64,
    key: CompartmentKey,
    heads: Vec<DiscriminatorHead>,
}

impl HeadGroup {
    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn key(&self) -> CompartmentKey {
        self.key
    }

    pub fn heads(&self) -> &[DiscriminatorHead] {
        &self.heads
    }

    pub fn heads_mut(&mut self) -> &mut [DiscriminatorHead] {
        &mut self.heads
    }

    pub fn param_count(&self) -> usize {
        self.heads.iter().map(|h| h.params().numel()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Slot {
    id: u64,
    group: Option<HeadGroup>,
}

#[derive(Debug, Clone, PartialEq)]
struct Compartment {
    slots: Vec<Slot>,
    refreshed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub t_stars: Vec<usize>,
    pub groups_per_compartment: usize,
    pub layout: PoolLayout,
    pub refresh_rate: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorPool {
    config: PoolConfig,
    recipe: HeadRecipe,
    compartments: BTreeMap<CompartmentKey, Compartment>,
    rng: ChaCha8Rng,
}

pub fn init_pool(config: PoolConfig, recipe: HeadRecipe) -> Result<DiscriminatorPool> {
    if config.t_stars.is_empty() {
        return Err(Error::InvalidArgument("t_star set is empty".into()));
    }
    if config.groups_per_compartment == 0 {
        return Err(Error::InvalidArgument("groups_per_compartment must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&config.refresh_rate) {
        return Err(Error::InvalidArgument(format!("refresh_rate {} outside [0, 1]", config.refresh_rate)));
    }
    if recipe.num_levels() == 0 {
        return Err(Error::InvalidArgument("head recipe has no levels".into()));
    }
    recipe.check_budget()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut compartments = BTreeMap::new();
    let mut next_id = 0u64;
    for &t_star in &config.t_stars {
        for &task in config.layout.task_types() {
            let key = CompartmentKey { t_star, task };
            let slots = (0..config.groups_per_compartment)
                .map(|_| {
                    let heads = (0..recipe.num_levels())
                        .map(|l| init_head(recipe.spec(l, task.is_conditional()), rng.next_u64()))
                        .collect();
                    next_id += 1;
                    Slot { id: next_id - 1, group: Some(HeadGroup { id: next_id - 1, key, heads }) }
                })
                .collect();
            if compartments.insert(key, Compartment { slots, refreshed: 0 }).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate t_star {t_star}")));
            }
        }
    }
    Ok(DiscriminatorPool { config, recipe, compartments, rng })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompartmentStats {
    pub key: CompartmentKey,
    pub groups: usize,
    pub checked_out: usize,
    pub refreshed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub compartments: Vec<CompartmentStats>,
    pub total_groups: usize,
    pub total_heads: usize,
    pub checked_out: usize,
    pub refreshed: u64,
    /// 5th, 50th and 95th percentile of per-head parameter L2 norms, over
    /// heads currently in the pool.
    pub param_norm_percentiles: [f64; 3],
}

impl DiscriminatorPool {
    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    pub fn recipe(&self) -> &HeadRecipe {
        &self.recipe
    }

    pub fn levels(&self) -> usize {
        self.recipe.num_levels()
    }

    pub fn keys(&self) -> impl Iterator<Item = CompartmentKey> + '_ {
        self.compartments.keys().copied()
    }

    pub fn set_refresh_rate(&mut self, rate: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("refresh_rate {rate} outside [0, 1]")));
        }
        self.config.refresh_rate = rate;
        Ok(())
    }

    fn compartment(&self, key: CompartmentKey) -> Result<&Compartment> {
        self.compartments.get(&key).ok_or_else(|| Error::PoolState(format!("unknown compartment {key}")))
    }

    /// Groups currently in the pool (not checked out) for `key`.
    pub fn available(&self, key: CompartmentKey) -> Result<usize> {
        Ok(self.compartment(key)?.slots.iter().filter(|s| s.group.is_some()).count())
    }

    /// Read-only view of the groups currently in the pool for `key`.
    pub fn groups(&self, key: CompartmentKey) -> Result<impl Iterator<Item = &HeadGroup>> {
        Ok(self.compartment(key)?.slots.iter().filter_map(|s| s.group.as_ref()))
    }

    /// Checks out `m` distinct available groups, chosen uniformly without replacement.
    pub fn sample_heads(&mut self, key: CompartmentKey, m: usize) -> Result<Vec<HeadGroup>> {
        let comp = self
            .compartments
            .get_mut(&key)
            .ok_or_else(|| Error::PoolState(format!("unknown compartment {key}")))?;
        let free: Vec<usize> = (0..comp.slots.len()).filter(|&i| comp.slots[i].group.is_some()).collect();
        if m > free.len() {
            return Err(Error::PoolState(format!("{m} groups requested from {key}, {} available", free.len())));
        }
        let picks = sample_indices(&mut self.rng, free.len(), m);
        Ok(picks.iter().map(|p| comp.slots[free[p]].group.take().expect("free slot")).collect())
    }

    /// Returns checked-out groups with their updated parameters.
    pub fn release_heads(&mut self, groups: Vec<HeadGroup>) -> Result<()> {
        for group in groups {
            let slot = self
                .compartments
                .get_mut(&group.key)
                .and_then(|c| c.slots.iter_mut().find(|s| s.id == group.id))
                .ok_or_else(|| Error::PoolState(format!("group {} does not belong to this pool", group.id)))?;
            if slot.group.is_some() {
                return Err(Error::PoolState(format!("group {} is not checked out", group.id)));
            }
            slot.group = Some(group);
        }
        Ok(())
    }

    /// Re-initializes every available head independently with probability
    /// `refresh_rate`. Returns the number of heads refreshed.
    pub fn refresh(&mut self) -> usize {
        let rate = self.config.refresh_rate;
        if rate == 0.0 {
            return 0;
        }
        let mut total = 0;
        for comp in self.compartments.values_mut() {
            for group in comp.slots.iter_mut().filter_map(|s| s.group.as_mut()) {
                for head in &mut group.heads {
                    if self.rng.random_bool(rate) {
                        head.reinitialize(self.rng.next_u64());
                        comp.refreshed += 1;
                        total += 1;
                    }
                }
            }
        }
        total
    }

    pub fn stats(&self) -> PoolStats {
        let compartments: Vec<CompartmentStats> = self
            .compartments
            .iter()
            .map(|(&key, c)| CompartmentStats {
                key,
                groups: c.slots.len(),
                checked_out: c.slots.iter().filter(|s| s.group.is_none()).count(),
                refreshed: c.refreshed,
            })
            .collect();
        let mut norms: Vec<f64> = self
            .compartments
            .values()
            .flat_map(|c| c.slots.iter().filter_map(|s| s.group.as_ref()))
            .flat_map(|g| g.heads.iter().map(|h| h.params().sq_norm().sqrt()))
            .collect();
        norms.sort_by(f64::total_cmp);
        let pct = |q: f64| {
            if norms.is_empty() {
                0.0
            } else {
                norms[((norms.len() - 1) as f64 * q).round() as usize]
            }
        };
        let total_groups: usize = compartments.iter().map(|c| c.groups).sum();
        PoolStats {
            total_heads: total_groups * self.levels(),
            checked_out: compartments.iter().map(|c| c.checked_out).sum(),
            refreshed: compartments.iter().map(|c| c.refreshed).sum(),
            total_groups,
            compartments,
            param_norm_percentiles: [pct(0.05), pct(0.5), pct(0.95)],
        }
    }

    /// Digest of every head parameter in the pool, in compartment/slot order.
    pub fn digest(&self) -> String {
        let mut all = ParamSet::new();
        for (key, c) in &self.compartments {
            for s in &c.slots {
                if let Some(g) = &s.group {
                    for (l, h) in g.heads.iter().enumerate() {
                        for (n, t) in h.params().iter() {
                            all.push(format!("{key}/{}/{l}/{n}", g.id), t.clone());
                        }
                    }
                }
            }
        }
        all.digest()
    }
}

/// Head count per task type and per `(task, t*)` compartment.
pub fn pool_arithmetic(pool: &DiscriminatorPool) -> (BTreeMap<TaskType, usize>, BTreeMap<CompartmentKey, usize>) {
    let mut per_task = BTreeMap::new();
    let mut per_comp = BTreeMap::new();
    for (key, c) in &pool.compartments {
        let n = c.slots.len() * pool.levels();
        *per_task.entry(key.task).or_insert(0) += n;
        per_comp.insert(*key, n);
    }
    (per_task, per_comp)
}

const POOL_MANIFEST: &str = "pool.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HeadRecord {
    spec: HeadSpec,
    params: Vec<BlobEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GroupRecord {
    id: u64,
    checked_out: bool,
    heads: Vec<HeadRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CompartmentRecord {
    key: CompartmentKey,
    refreshed: u64,
    groups: Vec<GroupRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PoolManifest {
    format_version: u32,
    kind: String,
    config: PoolConfig,
    recipe: HeadRecipe,
    rng: RngState,
    compartments: Vec<CompartmentRecord>,
}

/// Writes the pool to `dir`. Optimizer moments are not stored; heads resume
/// with fresh moments. Every group must be in the pool.
pub fn save_pool(pool: &DiscriminatorPool, dir: &Path) -> Result<()> {
    if pool.stats().checked_out > 0 {
        return Err(Error::PoolState("cannot checkpoint while groups are checked out".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut buf = Vec::new();
    let mut compartments = Vec::new();
    for (key, c) in &pool.compartments {
        let mut groups = Vec::new();
        for s in &c.slots {
            let g = s.group.as_ref().expect("checked above");
            let heads = g
                .heads
                .iter()
                .enumerate()
                .map(|(l, h)| {
                    let mut entries = Vec::new();
                    encode_params(h.params(), &format!("{key}/{}/{l}/", g.id), &mut buf, &mut entries);
                    HeadRecord { spec: *h.spec(), params: entries }
                })
                .collect();
            groups.push(GroupRecord { id: s.id, checked_out: false, heads });
        }
        compartments.push(CompartmentRecord { key: *key, refreshed: c.refreshed, groups });
    }
    let manifest = PoolManifest {
        format_version: crate::models::checkpoint::FORMAT_VERSION,
        kind: "pool".into(),
        config: pool.config.clone(),
        recipe: pool.recipe.clone(),
        rng: RngState {
            seed: hex::encode(pool.rng.get_seed()),
            stream: pool.rng.get_stream(),
            word_pos: pool.rng.get_word_pos().to_string(),
        },
        compartments,
    };
    write_atomic(&dir.join(BLOB_FILE), &buf)?;
    write_atomic(&dir.join(POOL_MANIFEST), &to_json_pretty(&manifest))
}

pub fn load_pool(dir: &Path) -> Result<DiscriminatorPool> {
    let mpath = dir.join(POOL_MANIFEST);
    let m: PoolManifest = read_json(&mpath)?;
    if m.kind != "pool" || m.format_version != crate::models::checkpoint::FORMAT_VERSION {
        return Err(Error::format(&mpath, "not a pool checkpoint of a supported version"));
    }
    let bpath = dir.join(BLOB_FILE);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let bad = |why: String| Error::format(&mpath, why);
    let seed: [u8; 32] = hex::decode(&m.rng.seed)
        .ok()
        .and_then(|v| v.try_into().ok())
        .ok_or_else(|| bad("rng seed must be 32 hex-encoded bytes".into()))?;
    let word_pos: u128 = m.rng.word_pos.parse().map_err(|_| bad("bad rng word position".into()))?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(m.rng.stream);
    rng.set_word_pos(word_pos);

    let mut compartments = BTreeMap::new();
    for rec in m.compartments {
        let mut slots = Vec::new();
        for gr in rec.groups {
            if gr.heads.len() != m.recipe.num_levels() {
                return Err(bad(format!("group {} has {} heads", gr.id, gr.heads.len())));
            }
            let mut heads = Vec::new();
            for (l, hr) in gr.heads.into_iter().enumerate() {
                if hr.spec != m.recipe.spec(l, rec.key.task.is_conditional()) {
                    return Err(bad(format!("group {} head {l} does not match the recipe", gr.id)));
                }
                let mut params = ParamSet::new();
                for e in &hr.params {
                    let short = e.name.rsplit('/').next().unwrap_or(&e.name).to_string();
                    params.push(short, decode_tensor(&bpath, &blob, e)?);
                }
                heads.push(DiscriminatorHead::from_parts(hr.spec, params)?);
            }
            slots.push(Slot { id: gr.id, group: Some(HeadGroup { id: gr.id, key: rec.key, heads }) });
        }
        compartments.insert(rec.key, Compartment { slots, refreshed: rec.refreshed });
    }
    Ok(DiscriminatorPool { config: m.config, recipe: m.recipe, compartments, rng })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{HeadArch, DEFAULT_HEAD_BUDGET};
    use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, Discrete};

    fn recipe(levels: usize) -> HeadRecipe {
        HeadRecipe {
            levels: vec![HeadArch::Vector { in_dim: 3, width: 2 }; levels],
            cond_classes: 2,
            budget: DEFAULT_HEAD_BUDGET,
        }
    }

    fn pool(t_stars: &[usize], groups: usize, levels: usize, rate: f64, seed: u64) -> DiscriminatorPool {
        let cfg = PoolConfig {
            t_stars: t_stars.to_vec(),
            groups_per_compartment: groups,
            layout: PoolLayout::MultiScaleDual,
            refresh_rate: rate,
            seed,
        };
        init_pool(cfg, recipe(levels)).unwrap()
    }

    fn chi_square_p(observed: &[f64], expected: &[f64], dof: f64) -> f64 {
        let stat: f64 = observed.iter().zip(expected).map(|(o, e)| (o - e).powi(2) / e).sum();
        1.0 - ChiSquared::new(dof).unwrap().cdf(stat)
    }

    #[test]
    fn full_size_arithmetic() {
        let p = pool(&[10, 250, 500, 750], 4, 10, 0.01, 0);
        let stats = p.stats();
        assert_eq!(stats.total_heads, 480);
        let (per_task, per_comp) = pool_arithmetic(&p);
        assert_eq!(per_task.len(), 3);
        assert!(per_task.values().all(|&n| n == 160));
        assert_eq!(per_comp.len(), 12);
        assert!(per_comp.values().all(|&n| n == 40));
    }

    #[test]
    fn desk_default_arithmetic_and_fresh_stats() {
        let p = pool(&[10, 63, 125, 188], 4, 4, 0.01, 0);
        let s = p.stats();
        assert_eq!((s.total_heads, s.compartments.len(), s.total_groups), (192, 12, 48));
        assert_eq!((s.checked_out, s.refreshed), (0, 0));
        assert!(s.compartments.iter().all(|c| c.groups == 4));
    }

    #[test]
    fn same_seed_same_pool() {
        assert_eq!(pool(&[10, 63], 2, 3, 0.01, 5), pool(&[10, 63], 2, 3, 0.01, 5));
        assert_ne!(pool(&[10, 63], 2, 3, 0.01, 5).digest(), pool(&[10, 63], 2, 3, 0.01, 6).digest());
    }

    #[test]
    fn empty_t_stars_rejected() {
        let cfg = PoolConfig {
            t_stars: vec![],
            groups_per_compartment: 1,
            layout: PoolLayout::PointDual,
            refresh_rate: 0.0,
            seed: 0,
        };
        assert!(init_pool(cfg, recipe(1)).is_err());
    }

    #[test]
    fn sample_release_contract() {
        let mut p = pool(&[10], 4, 2, 0.0, 1);
        let key = CompartmentKey { t_star: 10, task: TaskType::LOCAL_COND };
        let all = p.sample_heads(key, 4).unwrap();
        assert_eq!(all.len(), 4);
        assert!(p.sample_heads(key, 1).is_err());
        p.release_heads(all).unwrap();

        let a = p.sample_heads(key, 2).unwrap();
        let b = p.sample_heads(key, 2).unwrap();
        assert!(a.iter().all(|g| b.iter().all(|h| h.id() != g.id())));
        assert_eq!(p.stats().compartments.iter().find(|c| c.key == key).unwrap().checked_out, 4);
        p.release_heads(b).unwrap();

        let mut a = a;
        *a[0].heads_mut()[1].params_mut().scalar_mut(0) = 42.0;
        let target = a[0].id();
        let dup = a.clone();
        p.release_heads(a).unwrap();
        assert!(matches!(p.release_heads(dup), Err(Error::PoolState(_))));
        let all = p.sample_heads(key, 4).unwrap();
        let g = all.iter().find(|g| g.id() == target).unwrap();
        assert_eq!(g.heads()[1].params().tensors()[0].data()[0], 42.0);
        p.release_heads(all).unwrap();
        assert_eq!(p.available(key).unwrap(), 4);
    }

    #[test]
    fn unknown_key_rejected() {
        let mut p = pool(&[10], 1, 1, 0.0, 1);
        let key = CompartmentKey { t_star: 11, task: TaskType::LOCAL_COND };
        assert!(p.sample_heads(key, 1).is_err());
        let key = CompartmentKey { t_star: 10, task: TaskType::GLOBAL_UNCOND };
        assert!(p.sample_heads(key, 1).is_err());
    }

    #[test]
    fn degenerate_refresh_rates() {
        let mut p = pool(&[10, 63], 2, 3, 0.0, 1);
        let before = p.clone();
        assert_eq!(p.refresh(), 0);
        assert_eq!(p, before);

        p.set_refresh_rate(1.0).unwrap();
        assert_eq!(p.refresh(), 2 * 3 * 2 * 3);
        for key in before.keys() {
            for (g0, g1) in before.groups(key).unwrap().zip(p.groups(key).unwrap()) {
                assert_eq!(g0.id(), g1.id());
                for (h0, h1) in g0.heads().iter().zip(g1.heads()) {
                    assert_ne!(h0.params(), h1.params());
                }
            }
        }
        assert_eq!(p.stats().refreshed, 36);
    }

    #[test]
    fn refresh_skips_checked_out_groups() {
        let mut p = pool(&[10], 2, 3, 1.0, 1);
        let key = CompartmentKey { t_star: 10, task: TaskType::GLOBAL_COND };
        let out = p.sample_heads(key, 2).unwrap();
        let snapshot = out.clone();
        let n = p.refresh();
        assert_eq!(n, 2 * 2 * 3);
        p.release_heads(out).unwrap();
        let back: Vec<_> = p.groups(key).unwrap().cloned().collect();
        for g in &snapshot {
            assert!(back.contains(g));
        }
    }

    #[test]
    fn refresh_mean_for_480_heads() {
        let mut p = pool(&[10, 250, 500, 750], 4, 10, 0.01, 3);
        let trials = 10_000;
        let total: usize = (0..trials).map(|_| p.refresh()).sum();
        let mean = total as f64 / trials as f64;
        assert!((4.5..=5.1).contains(&mean), "mean {mean}");
    }

    #[test]
    fn refresh_counts_fit_binomial() {
        let mut p = pool(&[10, 250, 500, 750], 4, 10, 0.01, 4);
        let trials = 100 * 100;
        let bin = Binomial::new(0.01, 480).unwrap();
        // Bins 0..=9 and a tail bin for >= 10.
        let mut observed = [0.0; 11];
        for _ in 0..trials {
            observed[p.refresh().min(10)] += 1.0;
        }
        let mut expected: Vec<f64> = (0..10).map(|k| bin.pmf(k) * trials as f64).collect();
        expected.push(trials as f64 - expected.iter().sum::<f64>());
        assert!(chi_square_p(&observed, &expected, 10.0) > 1e-3);
    }

    #[test]
    fn sampling_is_uniform() {
        let mut p = pool(&[10], 4, 1, 0.0, 9);
        let key = CompartmentKey { t_star: 10, task: TaskType::GLOBAL_COND };
        let mut counts = BTreeMap::new();
        let n = 10_000;
        for _ in 0..n {
            let g = p.sample_heads(key, 1).unwrap();
            *counts.entry(g[0].id()).or_insert(0.0) += 1.0;
            p.release_heads(g).unwrap();
        }
        let observed: Vec<f64> = counts.values().copied().collect();
        assert_eq!(observed.len(), 4);
        for &c in &observed {
            assert!((0.225..=0.275).contains(&(c / n as f64)));
        }
        assert!(chi_square_p(&observed, &[n as f64 / 4.0; 4], 3.0) > 1e-3);
    }

    #[test]
    fn checkpoint_round_trip_keeps_rng_stream() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = pool(&[10, 63], 2, 2, 0.5, 7);
        p.refresh();
        for h in p.compartments.values_mut().flat_map(|c| c.slots.iter_mut()).filter_map(|s| s.group.as_mut()) {
            for head in &mut h.heads {
                crate::models::round_to_f32(head.params_mut());
            }
        }
        save_pool(&p, dir.path()).unwrap();
        let mut q = load_pool(dir.path()).unwrap();
        assert_eq!(p.digest(), q.digest());
        assert_eq!(p.stats(), q.stats());
        assert_eq!(p.refresh(), q.refresh());
        assert_eq!(p.digest(), q.digest());
        assert!(p.stats().refreshed > 0);

        let key = CompartmentKey { t_star: 10, task: TaskType::LOCAL_UNCOND };
        let out = p.sample_heads(key, 1).unwrap();
        assert!(save_pool(&p, dir.path()).is_err());
        p.release_heads(out).unwrap();
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        #[derive(Debug, Clone)]
        enum Op {
            Sample(usize, usize),
            Release(usize),
            Refresh,
        }

        fn op() -> impl Strategy<Value = Op> {
            prop_oneof![
                (0usize..6, 1usize..4).prop_map(|(k, m)| Op::Sample(k, m)),
                (0usize..8).prop_map(Op::Release),
                Just(Op::Refresh),
            ]
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(10_000))]

            #[test]
            fn conservation_and_exclusivity(ops in prop::collection::vec(op(), 1..24), seed in 0u64..1000) {
                let mut p = pool(&[10, 63], 3, 2, 0.3, seed);
                let keys: Vec<_> = p.keys().collect();
                let mut held: Vec<Vec<HeadGroup>> = Vec::new();
                for op in ops {
                    match op {
                        Op::Sample(k, m) => {
                            let key = keys[k % keys.len()];
                            let avail = p.available(key).unwrap();
                            match p.sample_heads(key, m) {
                                Ok(gs) => {
                                    prop_assert!(m <= avail);
                                    prop_assert!(gs.iter().all(|g| g.key() == key));
                                    held.push(gs);
                                }
                                Err(_) => prop_assert!(m > avail),
                            }
                        }
                        Op::Release(i) if !held.is_empty() => {
                            let gs = held.remove(i % held.len());
                            p.release_heads(gs).unwrap();
                        }
                        Op::Release(_) => {}
                        Op::Refresh => {
                            let snap = held.clone();
                            p.refresh();
                            prop_assert_eq!(&snap, &held);
                        }
                    }
                    let stats = p.stats();
                    let out: usize = held.iter().map(Vec::len).sum();
                    prop_assert_eq!(stats.checked_out, out);
                    prop_assert!(stats.compartments.iter().all(|c| c.groups == 3));
                    let mut ids: Vec<u64> = keys
                        .iter()
                        .flat_map(|&k| p.groups(k).unwrap().map(|g| g.id()).collect::<Vec<_>>())
                        .chain(held.iter().flatten().map(HeadGroup::id))
                        .collect();
                    ids.sort_unstable();
                    let n = ids.len();
                    ids.dedup();
                    prop_assert_eq!(ids.len(), n);
                    prop_assert_eq!(n, keys.len() * 3);
                }
            }
        }
    }
}
