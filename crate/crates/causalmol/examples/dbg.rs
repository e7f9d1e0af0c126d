use causalmol::autodiff::*;
use causalmol::config::RunConfig;
use causalmol::dataset::{Dataset, Splits};
use causalmol::evalrun::pool_from_bank;
use causalmol::fragment::RuleTable;
use causalmol::meta::*;
use causalmol::model::*;
use causalmol::evalx::roc_auc;
use std::path::Path;

fn main() {
    let run_cfg = RunConfig::parse_file(Path::new("/tmp/pilot/d32slow.cfg")).unwrap();
    let dataset = Dataset::load_tsv(Path::new("/tmp/pilot/data2/dataset.tsv")).unwrap();
    let _splits = Splits::load(Path::new("/tmp/pilot/data2/splits.json")).unwrap();
    let ckpt = Checkpoint::load(Path::new("/tmp/pilot/d32slow/checkpoint.json")).unwrap();
    let table = MolTable::from_dataset(&dataset, &RuleTable::v1()).unwrap();
    let mut meta = MetaConfig::from(&run_cfg);
    meta.inner_steps = 1;
    let ctx = RunContext {
        table: &table, dataset: &dataset,
        model_cfg: run_cfg.model_config(dataset.num_tasks()),
        meta, global_seed: run_cfg.seed,
        k_shot: run_cfg.k_shot, query_per_class: run_cfg.query_per_class,
    };
    let theta = ckpt.params().unwrap();
    let episode = sample_episode(&dataset, 8, 5, 16, 777).unwrap();
    let pool = pool_from_bank(&theta, &ctx.model_cfg, &ckpt.fragment_bank, 8, 777).unwrap();
    let tau = ctx.model_cfg.mask.tau_floor;
    let mut adapted = theta.clone();
    for step in 0..6 {
        // support loss + query auc at this adaptation depth
        let mut tape = Tape::new();
        let sup = episode_forward(&mut tape, &adapted, &table, &ctx.model_cfg, &episode, &[], &LossSubset::Support, &pool, ForwardMode::Train { tau, draw_seed: 42 }, None).unwrap();
        let mut qtape = Tape::new();
        let q = episode_forward(&mut qtape, &adapted, &table, &ctx.model_cfg, &episode, &[], &LossSubset::Query, &pool, ForwardMode::HardEval, None).unwrap();
        let labels: Vec<bool> = q.labels.iter().map(|l| *l > 0.5).collect();
        let auc = roc_auc(&q.predictions, &labels).unwrap();
        println!("step {step}: support loss {:.4} (causal {:.4} kl {:.4} var {:.4}) query auc {auc:.3} sup_pred {:?}",
            tape.value(sup.loss).values()[0], sup.loss_causal, sup.loss_kl, sup.loss_var,
            sup.predictions.iter().map(|p| (p*100.0).round()/100.0).collect::<Vec<_>>());
        let grads = tape.backward(sup.loss, &adapted).unwrap();
        adapted = sgd_step(&adapted, &grads, ctx.meta.inner_lr).unwrap();
    }
}
