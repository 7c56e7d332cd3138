use std::fs;
use std::path::{Path, PathBuf};

use semalign::embeddings::{
    margin_matrix, similarity_matrix, topk_similar, ClassEmbeddingTable, TopK,
};
use semalign::gradsuite::{run_gradient_suite, GradSuiteConfig, GRADIENT_TOLERANCE};
use semalign::harness::{
    expand_grid, generate_dataset, run_experiment_grid, CellOutput, GridOptions, ParamGroup,
};
use semalign::numerics::Matrix;

use crate::config::CliConfig;
use crate::CliError;

const THREADS_ENV: &str = "SEMALIGN_THREADS";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

/// Prints to stdout, ignoring a closed pipe (`semalign ... | head`).
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn labelled_csv(names: &[String], m: &Matrix) -> String {
    let mut out = format!("class,{}\n", names.join(","));
    for (name, row) in names.iter().zip(m.iter_rows()) {
        out.push_str(name);
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn margins(embeddings: &Path, gamma: f64, k: TopK, out: &Path) -> Result<(), CliError> {
    let table = ClassEmbeddingTable::load(embeddings, true)?;
    let margins = margin_matrix(&table, gamma, k.as_count())?;
    let similarity = similarity_matrix(&table)?;
    create_dir(out)?;
    write(
        &out.join("similarity.csv"),
        labelled_csv(table.names(), &similarity),
    )?;
    write(
        &out.join("margins.csv"),
        labelled_csv(table.names(), margins.values()),
    )?;

    let names = table.names();
    let mut report = String::new();
    for i in 0..table.len() {
        let near: Vec<String> = topk_similar(&similarity, i, k.as_count())?
            .into_iter()
            .map(|j| format!("{} {:.4}", names[j], similarity.get(i, j)))
            .collect();
        report.push_str(&format!("{}: {}\n", names[i], near.join(", ")));
    }
    let active = margins
        .values()
        .data()
        .iter()
        .filter(|&&m| m != 0.0)
        .count();
    report.push_str(&format!(
        "{active} nonzero margins (gamma {gamma}, k {k})\n"
    ));
    emit(&report);
    Ok(())
}

fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| {
                CliError::input(format!(
                    "{THREADS_ENV} must be a positive integer, got {v:?}"
                ))
            }),
    }
}

/// File-system friendly form of a cell id.
fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '.' | '=') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_cell(dir: &Path, out: &CellOutput<'_>) -> semalign::Result<()> {
    let cell_dir = dir
        .join("cells")
        .join(sanitize(&out.cell.id))
        .join(format!("seed_{}", out.seed));
    let io = |p: &Path, e| semalign::Error::Io {
        path: p.to_path_buf(),
        source: e,
    };
    fs::create_dir_all(&cell_dir).map_err(|e| io(&cell_dir, e))?;
    let confusion = cell_dir.join("confusion.csv");
    fs::write(&confusion, out.summary.confusion.to_csv()).map_err(|e| io(&confusion, e))?;
    let normalized = cell_dir.join("confusion_normalized.csv");
    fs::write(&normalized, out.summary.confusion.to_normalized_csv())
        .map_err(|e| io(&normalized, e))?;
    out.model.save(cell_dir.join("model.json"))
}

pub fn run(
    config: Option<&Path>,
    overrides: &[String],
    out: &Path,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg = CliConfig::resolve(config, overrides)?;
    if let Some(s) = seed {
        cfg.experiment.seeds = vec![s];
    }
    let threads = threads_from_env()?;
    let cells = expand_grid(&cfg.experiment, &cfg.synth, &cfg.grid.axes()?)?;

    let dir: PathBuf = out.join(cfg.hash());
    create_dir(&dir)?;
    write(&dir.join("config.toml"), cfg.to_toml())?;

    let sink = |o: &CellOutput<'_>| write_cell(&dir, o);
    let results = run_experiment_grid(
        &cells,
        &cfg.experiment.seeds,
        &GridOptions { threads },
        Some(&sink),
    )?;
    write(&dir.join("results.csv"), results.to_csv())?;
    write(&dir.join("summary.csv"), results.summary_csv())?;
    emit(&format!("{}\n", dir.display()));

    let failed: Vec<String> = results
        .failures()
        .map(|r| {
            let msg = r
                .outcome
                .as_ref()
                .err()
                .map(String::as_str)
                .unwrap_or_default();
            format!("cell {} seed {}: {msg}", r.cell_id, r.seed)
        })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError {
            code: CliError::TRAINING,
            message: format!("{} run(s) failed\n{}", failed.len(), failed.join("\n")),
        })
    }
}

pub fn gradcheck(
    cfg: &GradSuiteConfig,
    seeds: u64,
    corrupt: Option<ParamGroup>,
) -> Result<(), CliError> {
    if seeds == 0 {
        return Err(CliError::input("--seeds must be at least 1"));
    }
    let mut report = run_gradient_suite(cfg, corrupt)?;
    for s in 1..seeds {
        let next = GradSuiteConfig {
            seed: cfg.seed + s,
            ..cfg.clone()
        };
        report.merge(&run_gradient_suite(&next, corrupt)?);
    }
    let mut text = String::new();
    for g in &report.groups {
        text.push_str(&format!(
            "{:<15} ce {:.3e}  sam {:.3e}\n",
            g.group.name(),
            g.ce,
            g.sam
        ));
    }
    text.push_str(&format!(
        "max relative error {:.3e} over {seeds} seed(s)\n",
        report.max()
    ));
    emit(&text);
    let failing = report.failing(GRADIENT_TOLERANCE);
    if failing.is_empty() {
        Ok(())
    } else {
        let names: Vec<&str> = failing.iter().map(|g| g.name()).collect();
        Err(CliError {
            code: CliError::VERIFICATION,
            message: format!(
                "gradient mismatch above {GRADIENT_TOLERANCE:e} in: {}",
                names.join(", ")
            ),
        })
    }
}

pub fn synth(
    config: Option<&Path>,
    overrides: &[String],
    out: &Path,
    seed: Option<u64>,
) -> Result<(), CliError> {
    let mut cfg = CliConfig::resolve(config, overrides)?;
    if let Some(s) = seed {
        cfg.synth.seed = s;
    }
    let data = generate_dataset(&cfg.synth)?;
    create_dir(out)?;
    data.save(out.join("dataset.json"))?;
    if let Some(t) = &data.embeddings {
        t.save(out.join("embeddings.txt"))?;
    }
    write(&out.join("base_train.csv"), data.base_train.to_csv())?;
    write(&out.join("novel_train.csv"), data.novel_train.to_csv())?;
    write(&out.join("test.csv"), data.test.to_csv())?;
    emit(&format!(
        "{} classes, {} base / {} novel / {} test samples -> {}\n",
        data.spec.num_classes(),
        data.base_train.len(),
        data.novel_train.len(),
        data.test.len(),
        out.display()
    ));
    Ok(())
}
