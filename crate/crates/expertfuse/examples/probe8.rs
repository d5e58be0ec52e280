// Calibration diagnostics over a finished run directory.
fn main() -> expertfuse::Result<()> {
    let out = std::env::args().nth(1).unwrap_or("/tmp/run7".into());
    let out = std::path::Path::new(&out);
    let corpus = expertfuse::data::load_corpus(&out.join("corpus"))?;
    let artifacts = expertfuse::pipeline::RunArtifacts::load(out, &corpus)?;
    let internal: Vec<String> = corpus
        .internal_sites()
        .iter()
        .map(|s| s.site_id.clone())
        .collect();

    // criterion 8: argmax attention vs site expert
    for model in &artifacts.fusions {
        if model.mode == expertfuse::fusion::FusionMode::Sf {
            continue;
        }
        let mut hit = 0usize;
        let mut total = 0usize;
        for (idx, site) in corpus.internal_sites().iter().enumerate() {
            let vault = expertfuse::multisite::SiteVault::new((*site).clone());
            let predictor = expertfuse::metrics::FusionPredictor {
                experts: artifacts.expert_refs(),
                model,
            };
            let recs = vault.evaluate(
                expertfuse::multisite::EvalScope::Split(expertfuse::data::Split::Test),
                &predictor,
            )?;
            let site_hit = recs
                .iter()
                .filter(|r| {
                    expertfuse::tensor::argmax_slice(r.attention.as_ref().unwrap()) == idx
                })
                .count();
            hit += site_hit;
            total += recs.len();
            let n_exp = artifacts.experts.len();
            let mut mean_a = vec![0.0; n_exp];
            for r in &recs {
                for (j, v) in r.attention.as_ref().unwrap().iter().enumerate() {
                    mean_a[j] += v / recs.len() as f64;
                }
            }
            let mean_s: Vec<String> = mean_a.iter().map(|v| format!("{v:.2}")).collect();
            println!(
                "crit8 {} {} {}/{} meanA=[{}]",
                model.mode.name(),
                site.site_id,
                site_hit,
                recs.len(),
                mean_s.join(",")
            );
        }
        println!(
            "crit8 {} pooled {:.3}",
            model.mode.name(),
            hit as f64 / total as f64
        );
    }

    // criterion 9: pooled internal entropy
    let report = expertfuse::pipeline::write_attention_reports(&corpus, &artifacts, out)?;
    let names: Vec<&str> = internal.iter().map(|s| s.as_str()).collect();
    for mode in ["attn-wsf", "nmd-wsf"] {
        if let Some(e) = report.pooled_entropy(mode, &names) {
            println!("crit9 {mode} pooled_internal_entropy {e:.4}");
        }
    }

    // nmd separation: mean |g| own site vs disjoint sites
    for (idx, expert) in artifacts.experts.iter().enumerate() {
        let own = corpus.internal_sites()[idx];
        let own_norm = mean_g_norm(expert, own)?;
        print!("gsep expert {} own {:.4}", expert.id, own_norm);
        for site in corpus.internal_sites() {
            let disjoint = site
                .labels
                .iter()
                .all(|l| !expert.label_set.contains(l));
            if disjoint {
                print!(" vs {} {:.4}", site.site_id, mean_g_norm(expert, site)?);
            }
        }
        println!();
    }

    // criterion 10: cumulative curves
    let timings = expertfuse::pipeline::read_timings(out)?;
    for (m, curve) in expertfuse::report::cumulative_training_curves(&timings) {
        let pts: Vec<String> = curve.iter().map(|(s, v)| format!("s{s}={v:.1}")).collect();
        println!("crit10 {m} {}", pts.join(" "));
    }
    Ok(())
}

fn mean_g_norm(
    expert: &expertfuse::expert::Expert,
    site: &expertfuse::data::SiteDataset,
) -> expertfuse::Result<f64> {
    let test = site.labeled(expertfuse::data::Split::Test);
    let images: Vec<&expertfuse::Tensor> = test.iter().map(|(i, _)| *i).collect();
    let g = expertfuse::nmd::nmd_vectors(expert, &images)?;
    let p = expert.nmd_dim();
    let mut total = 0.0;
    for r in 0..images.len() {
        let norm: f64 = g.data[r * p..(r + 1) * p].iter().map(|v| v * v).sum::<f64>();
        total += norm.sqrt();
    }
    Ok(total / images.len() as f64)
}
