//! Synthetic few-shot tasks with planted causal functional groups.
//!
//! Each task gets its own causal motif; positives carry that motif attached
//! to a ring scaffold alongside label-uncorrelated distractor motifs drawn
//! from the other tasks. The generator self-checks that the fragmenter
//! recovers every planted motif as one fragment, so atom-level ground truth
//! is exact by construction.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{save_groundtruth, Dataset, DatasetError, GroundTruthRecord, Splits};
use crate::fragment::{fragment_molecule, FragmentError, RuleTable};
use crate::smiles::{
    parse, serialize_with_atom_order, Atom, Bond, BondOrder, Element, MolecularGraph,
    SmilesError,
};
use crate::util::derive_rng;
#[allow(unused_imports)]
use rand::seq::SliceRandom as _;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("motif vocabulary too small: {usable} usable motifs for {needed} tasks")]
    VocabularyTooSmall { usable: usize, needed: usize },
    #[error("motif `{smiles}` is not recoverable under the cleavage rules: {reason}")]
    UnrecoverableMotif { smiles: String, reason: String },
    #[error("scaffold `{0}` has no free carbon ring sites")]
    BadScaffold(String),
    #[error("generation self-check failed {0} times in a row")]
    SelfCheckExhausted(usize),
    #[error(transparent)]
    Smiles(#[from] SmilesError),
    #[error(transparent)]
    Fragment(#[from] FragmentError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_tasks_train: usize,
    pub n_tasks_test: usize,
    pub motif_vocab: Vec<String>,
    pub scaffold_vocab: Vec<String>,
    pub molecules_per_task: usize,
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_tasks_train: 8,
            n_tasks_test: 2,
            motif_vocab: [
                "O",             // hydroxyl
                "[N+](=O)[O-]",  // nitro
                "C(=O)O",        // carboxyl (splits under the rule table)
                "N",             // amine
                "Cl",            // halide
                "S",             // thiol
                "OC",            // methoxy (splits under the rule table)
                "C#N",           // cyano
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            scaffold_vocab: ["c1ccccc1", "C1CCCCC1", "c1ccncc1"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            molecules_per_task: 200,
            label_noise: 0.0,
            seed: 0,
        }
    }
}

/// A motif validated against the fragmenter: attached to a benzene reference
/// it comes back as exactly one fragment with a stable canonical key.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotifInfo {
    pub smiles: String,
    pub key: String,
    pub num_atoms: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub motif: MotifInfo,
    pub is_test: bool,
}

/// Validate one motif: plant it on benzene, fragment, and require a single
/// non-scaffold fragment covering exactly the motif atoms.
pub fn motif_key(motif_smiles: &str, rules: &RuleTable) -> Result<MotifInfo, SynthError> {
    let scaffold = parse("c1ccccc1")?;
    let motif = parse(motif_smiles)?;
    let combined = attach(&scaffold, &[(0, &motif)]);
    let groups = fragment_molecule(&combined, 0, rules)?;
    let motif_atoms: Vec<usize> =
        (scaffold.num_atoms()..combined.num_atoms()).collect();
    let covering: Vec<_> =
        groups.iter().filter(|g| g.atom_indices.iter().any(|a| motif_atoms.contains(a))).collect();
    if covering.len() != 1 || covering[0].atom_indices != motif_atoms {
        return Err(SynthError::UnrecoverableMotif {
            smiles: motif_smiles.to_string(),
            reason: format!(
                "fragments into {} pieces over the motif atoms",
                covering.len()
            ),
        });
    }
    Ok(MotifInfo {
        smiles: motif_smiles.to_string(),
        key: covering[0].canonical_key.clone(),
        num_atoms: motif.num_atoms(),
    })
}

/// Injective task -> motif assignment in vocabulary order: the first
/// `n_tasks_train` usable motifs become training tasks, the next
/// `n_tasks_test` become test tasks, so the config controls which motifs are
/// held out. Motifs that the rule table cannot recover are dropped with a
/// warning before assignment.
pub fn gen_task_spec(spec: &SynthSpec, rules: &RuleTable) -> Result<Vec<TaskSpec>, SynthError> {
    let mut usable = Vec::new();
    for smiles in &spec.motif_vocab {
        match motif_key(smiles, rules) {
            Ok(info) => usable.push(info),
            Err(SynthError::UnrecoverableMotif { smiles, reason }) => {
                eprintln!("warning: skipping motif `{smiles}`: {reason}");
            }
            Err(e) => return Err(e),
        }
    }
    let needed = spec.n_tasks_train + spec.n_tasks_test;
    if usable.len() < needed {
        return Err(SynthError::VocabularyTooSmall { usable: usable.len(), needed });
    }
    Ok(usable
        .into_iter()
        .take(needed)
        .enumerate()
        .map(|(task_id, motif)| TaskSpec { task_id, motif, is_test: task_id >= spec.n_tasks_train })
        .collect())
}

/// Graft motif copies onto distinct carbon ring atoms of the scaffold via
/// single bonds; atom index blocks follow scaffold order then motif order.
fn attach(scaffold: &MolecularGraph, motifs: &[(usize, &MolecularGraph)]) -> MolecularGraph {
    let mut atoms: Vec<Atom> = scaffold.atoms.clone();
    let mut bonds: Vec<Bond> = scaffold.bonds.clone();
    for (site, motif) in motifs {
        let offset = atoms.len();
        atoms.extend(motif.atoms.iter().copied());
        bonds.extend(motif.bonds.iter().map(|b| Bond {
            a: b.a + offset,
            b: b.b + offset,
            order: b.order,
        }));
        bonds.push(Bond { a: *site, b: offset, order: BondOrder::Single });
    }
    let flags = crate::smiles::ring_flags_for_tests(atoms.len(), &bonds);
    MolecularGraph { atoms, bonds, ring_bond_flags: flags, source_smiles: String::new() }
}

fn carbon_ring_sites(scaffold: &MolecularGraph) -> Vec<usize> {
    (0..scaffold.num_atoms())
        .filter(|&i| scaffold.atoms[i].element == Element::C && scaffold.atom_in_ring(i))
        .collect()
}

pub struct GeneratedMolecule {
    pub smiles: String,
    pub reported_label: bool,
    pub true_label: bool,
    pub ground_truth_atoms: Vec<usize>,
}

const SELF_CHECK_RETRIES: usize = 20;

/// One molecule for `task`: scaffold + 1-2 distractor motifs from other
/// tasks + the causal motif iff the true label is positive. The reported
/// label flips with probability `label_noise`; ground truth always follows
/// the structure.
pub fn gen_molecule<R: Rng>(
    task: &TaskSpec,
    all_tasks: &[TaskSpec],
    true_label: bool,
    spec: &SynthSpec,
    rules: &RuleTable,
    rng: &mut R,
) -> Result<GeneratedMolecule, SynthError> {
    let others: Vec<&TaskSpec> = all_tasks.iter().filter(|t| t.task_id != task.task_id).collect();
    for _attempt in 0..SELF_CHECK_RETRIES {
        let scaffold_smiles = &spec.scaffold_vocab[rng.gen_range(0..spec.scaffold_vocab.len())];
        let scaffold = parse(scaffold_smiles)?;
        let mut sites = carbon_ring_sites(&scaffold);
        if sites.is_empty() {
            return Err(SynthError::BadScaffold(scaffold_smiles.clone()));
        }
        let n_distractors = rng.gen_range(1..=2usize).min(sites.len().saturating_sub(1));
        let mut chosen_motifs: Vec<String> = Vec::new();
        for _ in 0..n_distractors {
            chosen_motifs.push(others[rng.gen_range(0..others.len())].motif.smiles.clone());
        }
        if true_label {
            chosen_motifs.push(task.motif.smiles.clone());
        }
        if chosen_motifs.len() > sites.len() {
            continue;
        }
        use rand::seq::SliceRandom;
        sites.shuffle(rng);
        let parsed: Vec<MolecularGraph> =
            chosen_motifs.iter().map(|s| parse(s)).collect::<Result<_, _>>()?;
        let placed: Vec<(usize, &MolecularGraph)> =
            sites.iter().copied().zip(parsed.iter()).collect();
        let combined = attach(&scaffold, &placed);
        // causal motif atoms in combined numbering (it went in last)
        let truth_combined: Vec<usize> = if true_label {
            let motif_len = parsed.last().expect("causal motif present").num_atoms();
            (combined.num_atoms() - motif_len..combined.num_atoms()).collect()
        } else {
            Vec::new()
        };
        let (smiles, order) = match serialize_with_atom_order(&combined) {
            Ok(x) => x,
            Err(_) => continue,
        };
        // positions after the round trip
        let new_index: HashMap<usize, usize> =
            order.iter().enumerate().map(|(new, old)| (*old, new)).collect();
        let mut ground_truth_atoms: Vec<usize> =
            truth_combined.iter().map(|a| new_index[a]).collect();
        ground_truth_atoms.sort_unstable();

        // self-check: the emitted string parses back and the fragmenter
        // recovers exactly the planted motif
        let Ok(reparsed) = parse(&smiles) else { continue };
        let Ok(groups) = fragment_molecule(&reparsed, 0, rules) else { continue };
        let causal_groups: Vec<_> =
            groups.iter().filter(|g| g.canonical_key == task.motif.key).collect();
        let ok = if true_label {
            causal_groups.len() == 1 && causal_groups[0].atom_indices == ground_truth_atoms
        } else {
            causal_groups.is_empty()
        };
        if !ok {
            continue;
        }
        let reported_label = if spec.label_noise > 0.0 && rng.gen::<f64>() < spec.label_noise {
            !true_label
        } else {
            true_label
        };
        return Ok(GeneratedMolecule {
            smiles,
            reported_label,
            true_label,
            ground_truth_atoms,
        });
    }
    Err(SynthError::SelfCheckExhausted(SELF_CHECK_RETRIES))
}

pub struct GeneratedDataset {
    pub dataset: Dataset,
    pub splits: Splits,
    pub ground_truth: Vec<GroundTruthRecord>,
    pub tasks: Vec<TaskSpec>,
}

/// Build the full benchmark in memory: exact class balance per task (floor
/// half actives), each molecule labeled only for its own task.
pub fn gen_dataset(spec: &SynthSpec, rules: &RuleTable) -> Result<GeneratedDataset, SynthError> {
    let tasks = gen_task_spec(spec, rules)?;
    let n_tasks = tasks.len();
    let mut smiles = Vec::new();
    let mut labels: Vec<Vec<Option<bool>>> = Vec::new();
    let mut ground_truth = Vec::new();
    let mut rng = derive_rng(&[spec.seed, 0x6E4]);
    for task in &tasks {
        let actives = spec.molecules_per_task / 2;
        for i in 0..spec.molecules_per_task {
            let true_label = i < actives;
            let gen = gen_molecule(task, &tasks, true_label, spec, rules, &mut rng)?;
            let molecule_id = smiles.len();
            smiles.push(gen.smiles.clone());
            let mut row = vec![None; n_tasks];
            row[task.task_id] = Some(gen.reported_label);
            labels.push(row);
            ground_truth.push(GroundTruthRecord {
                molecule_id,
                smiles: gen.smiles,
                atoms: gen.ground_truth_atoms,
            });
        }
    }
    let dataset = Dataset {
        smiles,
        labels,
        task_names: (0..n_tasks).map(|t| format!("task_{t}")).collect(),
    };
    let splits = Splits {
        train_tasks: tasks.iter().filter(|t| !t.is_test).map(|t| t.task_id).collect(),
        test_tasks: tasks.iter().filter(|t| t.is_test).map(|t| t.task_id).collect(),
    };
    Ok(GeneratedDataset { dataset, splits, ground_truth, tasks })
}

/// Write dataset.tsv, splits.json, groundtruth.jsonl, and tasks.json under
/// `out_dir`. Deterministic bytes for a fixed spec.
pub fn write_dataset(generated: &GeneratedDataset, out_dir: &Path) -> Result<(), SynthError> {
    std::fs::create_dir_all(out_dir).map_err(|e| DatasetError::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    generated.dataset.save_tsv(&out_dir.join("dataset.tsv"))?;
    generated.splits.save(&out_dir.join("splits.json"))?;
    save_groundtruth(&out_dir.join("groundtruth.jsonl"), &generated.ground_truth)?;
    let tasks_text = serde_json::to_string_pretty(&generated.tasks).expect("serializable");
    std::fs::write(out_dir.join("tasks.json"), tasks_text).map_err(|e| DatasetError::Io {
        path: out_dir.join("tasks.json").display().to_string(),
        source: e,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ten_motifs() -> Vec<String> {
        ["O", "[N+](=O)[O-]", "N", "Cl", "S", "C#N", "F", "Br", "I", "C(F)(F)F"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn spec(train: usize, test: usize, per_task: usize, seed: u64) -> SynthSpec {
        SynthSpec {
            n_tasks_train: train,
            n_tasks_test: test,
            motif_vocab: ten_motifs(),
            molecules_per_task: per_task,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn task_assignment_is_injective_and_split() {
        let s = spec(3, 2, 10, 1);
        let tasks = gen_task_spec(&s, &RuleTable::v1()).unwrap();
        assert_eq!(tasks.len(), 5);
        let keys: std::collections::HashSet<&str> =
            tasks.iter().map(|t| t.motif.key.as_str()).collect();
        assert_eq!(keys.len(), 5);
        assert!(tasks.iter().filter(|t| t.is_test).count() == 2);
        let same = gen_task_spec(&s, &RuleTable::v1()).unwrap();
        assert_eq!(
            tasks.iter().map(|t| t.motif.smiles.clone()).collect::<Vec<_>>(),
            same.iter().map(|t| t.motif.smiles.clone()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn too_many_tasks_rejected() {
        let mut s = spec(8, 3, 10, 1);
        s.motif_vocab = ten_motifs();
        assert!(matches!(
            gen_task_spec(&s, &RuleTable::v1()),
            Err(SynthError::VocabularyTooSmall { usable: 10, needed: 11 })
        ));
    }

    #[test]
    fn default_vocab_drops_splitting_motifs() {
        // carboxyl and methoxy split under the rule table and are skipped
        let s = SynthSpec { n_tasks_train: 5, n_tasks_test: 1, ..Default::default() };
        let tasks = gen_task_spec(&s, &RuleTable::v1()).unwrap();
        assert_eq!(tasks.len(), 6);
        for t in &tasks {
            assert_ne!(t.motif.smiles, "C(=O)O");
            assert_ne!(t.motif.smiles, "OC");
        }
        let s_bad = SynthSpec { n_tasks_train: 7, n_tasks_test: 0, ..Default::default() };
        assert!(matches!(
            gen_task_spec(&s_bad, &RuleTable::v1()),
            Err(SynthError::VocabularyTooSmall { usable: 6, needed: 7 })
        ));
    }

    #[test]
    fn positive_molecules_carry_recoverable_truth() {
        let s = spec(4, 1, 10, 3);
        let rules = RuleTable::v1();
        let tasks = gen_task_spec(&s, &rules).unwrap();
        let mut rng = derive_rng(&[9]);
        for task in &tasks {
            for _ in 0..5 {
                let m = gen_molecule(task, &tasks, true, &s, &rules, &mut rng).unwrap();
                assert!(!m.ground_truth_atoms.is_empty());
                let g = parse(&m.smiles).unwrap();
                let frags = fragment_molecule(&g, 0, &rules).unwrap();
                let hit = frags
                    .iter()
                    .find(|f| f.canonical_key == task.motif.key)
                    .expect("causal motif recovered");
                assert_eq!(hit.atom_indices, m.ground_truth_atoms);
            }
        }
    }

    #[test]
    fn negative_molecules_lack_causal_key() {
        let s = spec(4, 1, 10, 4);
        let rules = RuleTable::v1();
        let tasks = gen_task_spec(&s, &rules).unwrap();
        let mut rng = derive_rng(&[11]);
        for task in &tasks {
            for _ in 0..5 {
                let m = gen_molecule(task, &tasks, false, &s, &rules, &mut rng).unwrap();
                assert!(m.ground_truth_atoms.is_empty());
                let g = parse(&m.smiles).unwrap();
                let frags = fragment_molecule(&g, 0, &rules).unwrap();
                assert!(frags.iter().all(|f| f.canonical_key != task.motif.key));
            }
        }
    }

    #[test]
    fn label_noise_flips_expected_fraction() {
        let mut s = spec(2, 1, 10, 5);
        s.label_noise = 0.1;
        let rules = RuleTable::v1();
        let tasks = gen_task_spec(&s, &rules).unwrap();
        let mut rng = derive_rng(&[21]);
        let n = 1000;
        let mut flipped = 0;
        for i in 0..n {
            let m = gen_molecule(&tasks[0], &tasks, i % 2 == 0, &s, &rules, &mut rng).unwrap();
            if m.reported_label != m.true_label {
                flipped += 1;
            }
        }
        let frac = flipped as f64 / n as f64;
        assert!((0.08..=0.12).contains(&frac), "{frac}");
    }

    #[test]
    fn dataset_counts_and_balance() {
        let s = spec(3, 1, 20, 6);
        let gen = gen_dataset(&s, &RuleTable::v1()).unwrap();
        assert_eq!(gen.dataset.num_molecules(), 4 * 20);
        for task in 0..4 {
            let labeled: Vec<bool> =
                gen.dataset.labeled_molecules(task).map(|(_, l)| l).collect();
            assert_eq!(labeled.len(), 20);
            assert_eq!(labeled.iter().filter(|l| **l).count(), 10);
        }
        assert_eq!(gen.splits.train_tasks, vec![0, 1, 2]);
        assert_eq!(gen.splits.test_tasks, vec![3]);
    }

    #[test]
    fn generated_files_are_byte_identical_across_runs() {
        let s = spec(2, 1, 6, 7);
        let dir_a = std::env::temp_dir().join("causalmol_synth_a");
        let dir_b = std::env::temp_dir().join("causalmol_synth_b");
        for d in [&dir_a, &dir_b] {
            let _ = std::fs::remove_dir_all(d);
            write_dataset(&gen_dataset(&s, &RuleTable::v1()).unwrap(), d).unwrap();
        }
        for name in ["dataset.tsv", "splits.json", "groundtruth.jsonl", "tasks.json"] {
            let a = std::fs::read(dir_a.join(name)).unwrap();
            let b = std::fs::read(dir_b.join(name)).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn distractors_independent_of_label() {
        // chi-square independence per distractor motif at p > 0.01 (dof 1,
        // critical value 6.635)
        let s = spec(4, 0, 10, 8);
        let rules = RuleTable::v1();
        let tasks = gen_task_spec(&s, &rules).unwrap();
        let task = &tasks[0];
        let mut rng = derive_rng(&[31]);
        let n = 1000;
        let mut present = vec![[0.0f64; 2]; tasks.len()]; // [label][motif]
        let mut totals = [0.0f64; 2];
        for i in 0..n {
            let label = i % 2 == 0;
            let m = gen_molecule(task, &tasks, label, &s, &rules, &mut rng).unwrap();
            let g = parse(&m.smiles).unwrap();
            let frags = fragment_molecule(&g, 0, &rules).unwrap();
            totals[label as usize] += 1.0;
            for (ti, other) in tasks.iter().enumerate() {
                if other.task_id == task.task_id {
                    continue;
                }
                if frags.iter().any(|f| f.canonical_key == other.motif.key) {
                    present[ti][label as usize] += 1.0;
                }
            }
        }
        for (ti, other) in tasks.iter().enumerate() {
            if other.task_id == task.task_id {
                continue;
            }
            let (a, b) = (present[ti][1], present[ti][0]); // with motif, by label
            let (c, d) = (totals[1] - a, totals[0] - b); // without motif
            let total = a + b + c + d;
            let chi2 = total * (a * d - b * c).powi(2)
                / ((a + b) * (c + d) * (a + c) * (b + d));
            assert!(chi2 < 6.635, "motif {} chi2 {chi2}", other.motif.smiles);
        }
    }
}
