use baylm::checkpoint::save;
use baylm::nas::{
    arch_plot_data, arch_report_tsv, extract_top_n_from, gate_map, instantiate_selection, report_arch_weights,
    scratch_selection, search_space, selections_tsv, train_supernet, SuperNet,
};
use baylm::train::train;
use log::info;
use serde_json::json;

use super::train::{base_model, eval_json, init_model, log_json, train_config};
use super::Ctx;
use crate::config::FinetuneFrom;
use crate::data::{load_data, load_vocab};
use crate::error::{CliError, Result};

/// Trains the super-network, ranks architectures and optionally
/// fine-tunes the best one.
pub fn run(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let nc = &cfg.nas;
    let init = init_model(cfg)?;
    let data = load_data(cfg)?;
    let vocab = load_vocab(cfg, Some(&data), init.as_ref().and_then(|(_, v)| v.as_ref()))?;
    let base = base_model(cfg, init.as_ref().map(|(m, _)| m), &vocab, &ctx.rng)?;
    if base.arch != cfg.model {
        return Err(CliError::config("train.init_from: checkpoint architecture differs from [model]"));
    }
    let locations = if nc.locations.is_empty() {
        search_space(&cfg.model, nc.variant)
    } else {
        nc.locations.clone()
    };
    let mut sn = SuperNet::new(&base, &locations, nc.variant, nc.prior_sigma)
        .map_err(|e| CliError::from(e).with_key("nas.locations"))?;
    info!("super-network over {} locations", locations.len());

    let reference = init.as_ref().map(|(m, _)| m);
    let tc = train_config(cfg, reference, nc.epochs.max(1))?;
    let log = train_supernet(&mut sn, &data.train, &data.dev, &vocab, &tc, &ctx.rng.derive("supernet"))?;
    save(ctx.out.join("supernet.ckpt"), &sn.model, Some(&vocab))?;
    ctx.write("supernet_log.tsv", log.to_tsv())?;
    let rows = report_arch_weights(&sn);
    ctx.write("arch_weights.tsv", arch_report_tsv(&rows))?;
    ctx.write("arch_plot.dat", arch_plot_data(&rows))?;
    let sels = extract_top_n_from(&sn, nc.top_n);
    ctx.write("selections.tsv", selections_tsv(&sels, &locations))?;
    for (loc, (p, b)) in gate_map(&sn) {
        info!("{loc}: point {p:.3} bayes {b:.3}");
    }

    let best = &sels[0];
    let mut summary = json!({
        "variant": nc.variant,
        "locations": locations.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "supernet": log_json(&log),
        "selected": best.sites(&locations).iter().map(ToString::to_string).collect::<Vec<_>>(),
        "score": best.score,
    });
    if nc.finetune_epochs > 0 {
        let mut model = match nc.finetune {
            FinetuneFrom::Supernet => instantiate_selection(&sn, best, true)?,
            FinetuneFrom::Scratch => scratch_selection(&base, &locations, best, nc.variant, nc.prior_sigma)?,
        };
        let tc = train_config(cfg, reference, nc.finetune_epochs)?;
        let ft = train(&mut model, &data.train, &data.dev, &vocab, &tc, &ctx.rng.derive("finetune"))?;
        save(ctx.out.join("model.ckpt"), &model, Some(&vocab))?;
        ctx.write("finetune_log.tsv", ft.to_tsv())?;
        summary["finetune"] = log_json(&ft);
        summary["eval"] = eval_json(&model, &data, &vocab, tc.batch_size)?;
    }
    ctx.write_json("summary.json", &summary)?;
    print!("{}", selections_tsv(&sels, &locations));
    Ok(())
}
