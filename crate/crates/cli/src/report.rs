//! Renders a finished run directory into human-readable artifacts: a
//! markdown report, SVG plots, and PNG conversion grids. Every table cell
//! comes straight from persisted records; nothing is recomputed here.

use crate::svg::{HistogramGrid, LinePlot};
use encodenet_core::data::LabeledImageSet;
use encodenet_core::pipeline::{
    AblationTable, ClassClusters, Pipeline, Representative, TargetMode,
};
use encodenet_core::train::load_checkpoint;
use encodenet_core::{Error, Result, Tensor};
use std::fmt::Write as _;
use std::path::Path;

const MODES: [TargetMode; 3] = [
    TargetMode::SameImage,
    TargetMode::RepresentativeUnclustered,
    TargetMode::RepresentativeClustered,
];

/// Renders everything that can be rendered from the run directory and
/// returns the relative paths written. Errors if the directory has no
/// renderable stage output at all.
pub fn render(pipeline: &Pipeline) -> Result<Vec<String>> {
    let dir = pipeline.store().dir().to_path_buf();
    std::fs::create_dir_all(dir.join("plots"))?;
    std::fs::create_dir_all(dir.join("grids"))?;
    let mut written = Vec::new();

    let ablation = read_ablation(&dir)?;
    render_loss_plots(&dir, &mut written)?;
    render_elbow_plots(&dir, &mut written)?;
    render_entropy_histograms(pipeline, &dir, &mut written)?;
    render_conversion_grids(pipeline, &dir, &mut written)?;

    if ablation.is_none() && written.is_empty() {
        return Err(Error::Prerequisite(
            "run directory has no stage output to report on".into(),
        ));
    }

    let markdown = render_markdown(pipeline, ablation.as_ref(), &written)?;
    std::fs::write(dir.join("report.md"), markdown)?;
    written.push("report.md".into());
    Ok(written)
}

fn read_ablation(dir: &Path) -> Result<Option<AblationTable>> {
    let path = dir.join("ablation.json");
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&std::fs::read_to_string(path)?)?))
}

/// One plot per `*-loss.csv`, train and holdout series together.
fn render_loss_plots(dir: &Path, written: &mut Vec<String>) -> Result<()> {
    for name in sorted_files(dir, |n| n.ends_with("-loss.csv")) {
        let text = std::fs::read_to_string(dir.join(&name))?;
        let mut train = Vec::new();
        let mut holdout = Vec::new();
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() < 3 {
                continue;
            }
            let epoch: f64 = cols[0].parse().unwrap_or(f64::NAN);
            if let Ok(v) = cols[2].parse::<f64>() {
                train.push((epoch, v));
            }
            if cols.len() > 3 {
                if let Ok(v) = cols[3].parse::<f64>() {
                    holdout.push((epoch, v));
                }
            }
        }
        if train.is_empty() {
            continue;
        }
        let stem = name.trim_end_matches("-loss.csv");
        let mut series = vec![("train".to_string(), train)];
        if !holdout.is_empty() {
            series.push(("holdout".to_string(), holdout));
        }
        let plot = LinePlot {
            title: format!("{stem} loss"),
            x_label: "epoch".into(),
            y_label: "loss".into(),
            series,
            markers: vec![],
        };
        let rel = format!("plots/loss-{stem}.svg");
        std::fs::write(dir.join(&rel), plot.render())?;
        written.push(rel);
    }
    Ok(())
}

/// k-vs-SSE curves per class with the chosen k circled.
fn render_elbow_plots(dir: &Path, written: &mut Vec<String>) -> Result<()> {
    for name in sorted_files(dir, |n| n.starts_with("clusters-") && n.ends_with(".json")) {
        let clusters: ClassClusters =
            serde_json::from_str(&std::fs::read_to_string(dir.join(&name))?)?;
        let mut series = Vec::new();
        let mut markers = Vec::new();
        for info in &clusters.classes {
            if info.sse_by_k.len() < 2 {
                continue;
            }
            let pts: Vec<(f64, f64)> = info
                .sse_by_k
                .iter()
                .map(|&(k, sse)| (k as f64, sse))
                .collect();
            if let Some(&(_, sse)) = info.sse_by_k.iter().find(|&&(k, _)| k == info.k) {
                markers.push((info.k as f64, sse));
            }
            series.push((format!("class {}", info.class), pts));
        }
        if series.is_empty() {
            continue;
        }
        let stem = name.trim_end_matches(".json");
        let plot = LinePlot {
            title: format!("{stem}: SSE by cluster count"),
            x_label: "k".into(),
            y_label: "SSE".into(),
            series,
            markers,
        };
        let rel = format!("plots/elbow-{stem}.svg");
        std::fs::write(dir.join(&rel), plot.render())?;
        written.push(rel);
    }
    Ok(())
}

/// Entropy histograms, one panel per (class, cluster) cell.
fn render_entropy_histograms(
    pipeline: &Pipeline,
    dir: &Path,
    written: &mut Vec<String>,
) -> Result<()> {
    const BINS: usize = 10;
    let upper = (pipeline.train_set().num_classes() as f64).ln().max(1e-9);
    for name in sorted_files(dir, |n| n.starts_with("entropy-") && n.ends_with(".csv")) {
        let text = std::fs::read_to_string(dir.join(&name))?;
        let mut cells: std::collections::BTreeMap<(usize, usize), Vec<usize>> =
            std::collections::BTreeMap::new();
        for line in text.lines().skip(1) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() < 5 {
                continue;
            }
            let (Ok(class), Ok(cluster), Ok(entropy)) = (
                cols[1].parse::<usize>(),
                cols[2].parse::<usize>(),
                cols[3].parse::<f64>(),
            ) else {
                continue;
            };
            let bin = ((entropy / upper * BINS as f64) as usize).min(BINS - 1);
            cells.entry((class, cluster)).or_insert_with(|| vec![0; BINS])[bin] += 1;
        }
        if cells.is_empty() {
            continue;
        }
        let stem = name.trim_end_matches(".csv");
        let grid = HistogramGrid {
            title: format!("{stem}: prediction entropy by cell"),
            panels: cells
                .into_iter()
                .map(|((class, cluster), bins)| (format!("class {class} / cluster {cluster}"), bins))
                .collect(),
        };
        let rel = format!("plots/{stem}-hist.svg");
        std::fs::write(dir.join(&rel), grid.render())?;
        written.push(rel);
    }
    Ok(())
}

/// Input / reconstruction / target triplets for every trained autoencoder
/// found in the run directory.
fn render_conversion_grids(
    pipeline: &Pipeline,
    dir: &Path,
    written: &mut Vec<String>,
) -> Result<()> {
    let seeds = pipeline.config().seeds.clone();
    for mode in MODES {
        for &seed in &seeds {
            let ckpt = dir.join(format!("cae-{}-s{seed}.ckpt", mode.label()));
            if !ckpt.exists() {
                continue;
            }
            let mut cae = load_checkpoint(&ckpt)?;
            let rows = grid_rows(pipeline, seed, mode)?;
            if rows.is_empty() {
                continue;
            }
            let train = pipeline.train_set();
            let inputs: Vec<usize> = rows.iter().map(|r| r.0).collect();
            let batch = train.gather_images(&inputs)?;
            let outputs = cae.infer(&batch)?;
            let rel = format!("grids/conversion-{}-s{seed}.png", mode.label());
            write_grid(train, &rows, &outputs, &dir.join(&rel))?;
            written.push(rel);
        }
    }
    Ok(())
}

/// Picks (input, target) display rows: the first member of each cell that
/// is not the cell's own representative, up to 12 rows.
fn grid_rows(pipeline: &Pipeline, seed: u64, mode: TargetMode) -> Result<Vec<(usize, usize)>> {
    const MAX_ROWS: usize = 12;
    let train = pipeline.train_set();
    match pipeline.rank_file_names(seed, mode) {
        None => {
            let mut rows = Vec::new();
            for class in 0..train.num_classes() {
                if let Some(&first) = train.class_indices(class).first() {
                    rows.push((first, first));
                }
                if rows.len() == MAX_ROWS {
                    break;
                }
            }
            Ok(rows)
        }
        Some((_, reps_file, _)) => {
            let path = pipeline.store().abs(&reps_file);
            if !path.exists() {
                return Ok(Vec::new());
            }
            let reps: Vec<Representative> =
                serde_json::from_str(&std::fs::read_to_string(path)?)?;
            let clusters_file = pipeline
                .clusters_file_name(seed, mode)
                .expect("ranked modes cluster");
            let clusters: ClassClusters = serde_json::from_str(&std::fs::read_to_string(
                pipeline.store().abs(&clusters_file),
            )?)?;
            let mut rows = Vec::new();
            for rep in &reps {
                let member = (0..train.len()).find(|&i| {
                    train.label(i) == rep.class
                        && clusters.assignments[i] == rep.cluster
                        && i != rep.image_index
                });
                rows.push((member.unwrap_or(rep.image_index), rep.image_index));
                if rows.len() == MAX_ROWS {
                    break;
                }
            }
            Ok(rows)
        }
    }
}

/// Writes the 3-column grid (input, output, target), one 8-bit gray cell
/// per image, 2px separators.
fn write_grid(
    train: &LabeledImageSet,
    rows: &[(usize, usize)],
    outputs: &Tensor<f32>,
    path: &Path,
) -> Result<()> {
    let (c, h, w) = train.image_dims();
    let pad = 2usize;
    let cell = c * h * w;
    let width = 3 * w + 4 * pad;
    let height = rows.len() * h + (rows.len() + 1) * pad;
    let mut pixels = vec![32u8; width * height];
    let blit = |img: &[f32], row: usize, col: usize, pixels: &mut Vec<u8>| {
        for y in 0..h {
            for x in 0..w {
                // multi-channel images render as their channel mean
                let mut v = 0.0f32;
                for ch in 0..c {
                    v += img[ch * h * w + y * w + x];
                }
                let v = (v / c as f32).clamp(0.0, 1.0);
                let gy = pad + row * (h + pad) + y;
                let gx = pad + col * (w + pad) + x;
                pixels[gy * width + gx] = (v * 255.0).round() as u8;
            }
        }
    };
    for (i, &(input, target)) in rows.iter().enumerate() {
        blit(train.image(input), i, 0, &mut pixels);
        blit(&outputs.data()[i * cell..(i + 1) * cell], i, 1, &mut pixels);
        blit(train.image(target), i, 2, &mut pixels);
    }
    let image = image::GrayImage::from_raw(width as u32, height as u32, pixels)
        .expect("buffer matches dimensions");
    image
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

fn render_markdown(
    pipeline: &Pipeline,
    ablation: Option<&AblationTable>,
    written: &[String],
) -> Result<String> {
    let mut md = String::new();
    writeln!(md, "# Run report\n").unwrap();
    let config = pipeline.config();
    writeln!(
        md,
        "- train images: {}\n- test images: {}\n- classes: {}\n- seeds: {:?}\n- cluster mode: {:?}\n",
        pipeline.train_set().len(),
        pipeline.test_set().len(),
        pipeline.train_set().num_classes(),
        config.seeds,
        config.cluster,
    )
    .unwrap();

    if let Some(table) = ablation {
        writeln!(md, "## Ablation\n").unwrap();
        writeln!(md, "| variant | seed accuracies | median |").unwrap();
        writeln!(md, "|---|---|---|").unwrap();
        for row in &table.rows {
            let accs: Vec<String> = row
                .accuracies
                .iter()
                .map(|a| format!("{} → {:.4}", a.seed, a.accuracy))
                .collect();
            let median = row
                .median
                .map(|m| format!("{m:.4}"))
                .unwrap_or_else(|| "-".into());
            writeln!(md, "| {} | {} | {} |", row.label, accs.join(", "), median).unwrap();
        }
        writeln!(
            md,
            "\nExpected ordering (same_image < baseline < unclustered < clustered): **{}**\n",
            if table.expected_order_held { "held" } else { "violated" }
        )
        .unwrap();
        if !table.failures.is_empty() {
            writeln!(md, "### Failures\n").unwrap();
            for f in &table.failures {
                writeln!(md, "- {} seed {}: {}", f.label, f.seed, f.error).unwrap();
            }
            writeln!(md).unwrap();
        }
    }

    let plots: Vec<&String> = written.iter().filter(|p| p.starts_with("plots/")).collect();
    if !plots.is_empty() {
        writeln!(md, "## Plots\n").unwrap();
        for p in plots {
            writeln!(md, "- [{p}]({p})").unwrap();
        }
        writeln!(md).unwrap();
    }
    let grids: Vec<&String> = written.iter().filter(|p| p.starts_with("grids/")).collect();
    if !grids.is_empty() {
        writeln!(md, "## Conversion grids\n").unwrap();
        writeln!(md, "Columns: input, autoencoder output, target.\n").unwrap();
        for g in grids {
            writeln!(md, "- [{g}]({g})").unwrap();
        }
        writeln!(md).unwrap();
    }
    Ok(md)
}

fn sorted_files(dir: &Path, keep: impl Fn(&str) -> bool) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| keep(n))
        .collect();
    names.sort();
    names
}
