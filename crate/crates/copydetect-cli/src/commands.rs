//! Command bodies: fit, detect, rooms, simulate.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;

use copydetect::dataio::{
    check_fingerprint, load_model, parse_key, parse_responses, save_model, ExamDesign,
    ResponseMatrix, SavedModel,
};
use copydetect::indices::{detect_all_rooms, Family, IndexVariant, PairResult, Scorer};
use copydetect::models::{
    fit_nominal_mml, fit_wesolowsky, solve_students, NrmFitConfig, WesolowskyModel,
};
use copydetect::mtp::{massive_summary, room_report, RoomReport, SuspectRule};
use copydetect::simulate::{
    default_copy_levels, run_protocol, synthetic_population, ScorerSet, SimulationConfig,
    SyntheticSpec, VariantRates,
};

use crate::manifest::ManifestBuilder;
use crate::{DetectArgs, FitArgs, ModelKind, RoomsArgs, SimulateArgs, SuspectRuleArg};

/// Six-significant-digit rendering for console summaries; files keep full
/// precision.
fn sig6(value: f64) -> String {
    format!("{value:.5e}")
}

fn load_inputs(
    manifest: &mut ManifestBuilder,
    responses: &Path,
    key: &Path,
    n_options: usize,
) -> Result<(ExamDesign, ResponseMatrix)> {
    manifest.input(key)?;
    manifest.input(responses)?;
    let design = parse_key(key, n_options)?;
    let matrix = parse_responses(responses, &design)?;
    Ok((design, matrix))
}

pub fn cmd_fit(args: &FitArgs, manifest: &mut ManifestBuilder) -> Result<()> {
    let (design, matrix) = load_inputs(manifest, &args.responses, &args.key, args.n_options)?;
    let saved = match args.model {
        ModelKind::Nrm => {
            let config = NrmFitConfig {
                quad_nodes: args.quad_nodes,
                max_cycles: args.max_cycles,
                tol: args.tol,
                min_examinees: args.min_examinees,
            };
            let fit = fit_nominal_mml(&matrix, &config)?;
            eprintln!(
                "nominal model: {} cycles, {}, loglik {}",
                fit.cycles,
                if fit.converged {
                    "converged"
                } else {
                    "cycle limit reached"
                },
                sig6(*fit.loglik_history.last().unwrap())
            );
            SavedModel::Nominal(fit.model)
        }
        ModelKind::Wesolowsky => {
            let model = fit_wesolowsky(&matrix)?;
            let clamped = model.students.iter().filter(|s| s.boundary_clamped).count();
            eprintln!(
                "wesolowsky model: {} items, {} students ({} at bracket edge)",
                model.num_items(),
                model.students.len(),
                clamped
            );
            SavedModel::Wesolowsky(model.items)
        }
    };
    save_model(&saved, &design, &args.out)?;
    manifest.output(&args.out);
    println!("wrote {}", args.out.display());
    Ok(())
}

/// Builds a scorer for the requested family from a saved model file.
fn scorer_from_saved(saved: &SavedModel, matrix: &ResponseMatrix) -> Result<(Family, Scorer)> {
    match saved {
        SavedModel::Nominal(model) => {
            let scorer = Scorer::from_nominal(model, matrix)?;
            Ok((Family::Omega, scorer))
        }
        SavedModel::Wesolowsky(items) => {
            let students = solve_students(items, matrix);
            let model = WesolowskyModel {
                items: items.clone(),
                students,
            };
            let scorer = Scorer::from_wesolowsky(&model, matrix)?;
            Ok((Family::Gamma, scorer))
        }
    }
}

fn parse_variants(raw: &str) -> Result<Vec<IndexVariant>> {
    if raw.trim().eq_ignore_ascii_case("all") {
        return Ok(IndexVariant::ALL.to_vec());
    }
    raw.split(',')
        .map(|name| IndexVariant::from_str(name).map_err(|e| anyhow!(e)))
        .collect()
}

pub fn cmd_detect(args: &DetectArgs, manifest: &mut ManifestBuilder) -> Result<()> {
    let (design, matrix) = load_inputs(manifest, &args.responses, &args.key, args.n_options)?;
    let variants = parse_variants(&args.variant)?;

    let mut omega_scorer = None;
    let mut gamma_scorer = None;
    for model_path in &args.model {
        manifest.input(model_path)?;
        let (saved, fingerprint) = load_model(model_path)?;
        check_fingerprint(&fingerprint, &design).with_context(|| {
            format!(
                "model {} was fitted for a different exam",
                model_path.display()
            )
        })?;
        let (family, scorer) = scorer_from_saved(&saved, &matrix)?;
        let slot = match family {
            Family::Omega => &mut omega_scorer,
            Family::Gamma => &mut gamma_scorer,
        };
        if slot.is_some() {
            bail!("two {} models supplied", family.name());
        }
        *slot = Some(scorer);
    }
    for variant in &variants {
        let present = match variant.family {
            Family::Omega => omega_scorer.is_some(),
            Family::Gamma => gamma_scorer.is_some(),
        };
        if !present {
            bail!(
                "variant {} needs a {} model file (pass it with --model)",
                variant,
                variant.family.name()
            );
        }
    }

    let mut all_results: Vec<PairResult> = Vec::new();
    let mut skipped_rooms = 0usize;
    for variant in &variants {
        let scorer = match variant.family {
            Family::Omega => omega_scorer.as_ref().unwrap(),
            Family::Gamma => gamma_scorer.as_ref().unwrap(),
        };
        let detections = detect_all_rooms(&matrix, scorer, *variant, args.continuity_correction)?;
        for detection in detections {
            if detection.skipped {
                skipped_rooms += 1;
                eprintln!(
                    "room {} skipped: fewer than two eligible students",
                    detection.room_id
                );
            }
            all_results.extend(detection.results);
        }
    }
    write_pair_results(&args.out, &all_results)?;
    manifest.output(&args.out);

    let flagged = all_results
        .iter()
        .filter(|r| r.p_value <= args.alpha)
        .count();
    println!(
        "wrote {} ({} ordered pairs, {} with p <= {}, {} room-variant runs skipped)",
        args.out.display(),
        all_results.len(),
        flagged,
        sig6(args.alpha),
        skipped_rooms
    );
    Ok(())
}

fn write_pair_results(path: &Path, results: &[PairResult]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    writer.write_record([
        "copier",
        "source",
        "room",
        "variant",
        "matches",
        "statistic",
        "p_value",
    ])?;
    for result in results {
        writer.write_record([
            result.copier_id.as_str(),
            result.source_id.as_str(),
            result.room_id.as_str(),
            result.variant.name(),
            &result.matches.to_string(),
            &format!("{}", result.statistic),
            &format!("{}", result.p_value),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

struct ParsedPairRow {
    result: PairResult,
}

fn read_pair_results(path: &Path) -> Result<Vec<ParsedPairRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("cannot read {}", path.display()))?;
    let mut rows = Vec::new();
    for (index, record) in reader.records().enumerate() {
        let record = record?;
        let row_number = index + 2; // header is line 1
        if record.len() != 7 {
            bail!(
                "{}: row {}: expected 7 fields, found {}",
                path.display(),
                row_number,
                record.len()
            );
        }
        let variant = IndexVariant::from_str(&record[3])
            .map_err(|e| anyhow!("{}: row {}: {}", path.display(), row_number, e))?;
        let matches: usize = record[4]
            .parse()
            .with_context(|| format!("{}: row {}: bad matches", path.display(), row_number))?;
        let statistic: f64 = record[5]
            .parse()
            .with_context(|| format!("{}: row {}: bad statistic", path.display(), row_number))?;
        let p_value: f64 = record[6]
            .parse()
            .with_context(|| format!("{}: row {}: bad p_value", path.display(), row_number))?;
        rows.push(ParsedPairRow {
            result: PairResult {
                copier_id: record[0].to_string(),
                source_id: record[1].to_string(),
                room_id: record[2].to_string(),
                variant,
                matches,
                n_scored: matches,
                statistic,
                p_value,
            },
        });
    }
    Ok(rows)
}

pub fn cmd_rooms(args: &RoomsArgs, manifest: &mut ManifestBuilder) -> Result<()> {
    let (_, matrix) = load_inputs(manifest, &args.responses, &args.key, args.n_options)?;
    manifest.input(&args.results)?;
    let rows = read_pair_results(&args.results)?;

    let rule = match args.suspect_rule {
        SuspectRuleArg::Copier => SuspectRule::Copier,
        SuspectRuleArg::Either => SuspectRule::EitherRole,
    };

    // One variant per report; filter or verify.
    let mut variants: Vec<IndexVariant> = rows.iter().map(|r| r.result.variant).collect();
    variants.sort_by_key(|v| v.name());
    variants.dedup();
    let selected = match (&args.variant, variants.len()) {
        (Some(name), _) => IndexVariant::from_str(name).map_err(|e| anyhow!(e))?,
        (None, 0 | 1) => variants.first().copied().unwrap_or(IndexVariant::ALL[3]),
        (None, _) => bail!(
            "results contain {} variants ({}); pick one with --variant",
            variants.len(),
            variants
                .iter()
                .map(|v| v.name())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };

    let mut by_room: std::collections::HashMap<&str, Vec<PairResult>> =
        std::collections::HashMap::new();
    for row in &rows {
        if row.result.variant == selected {
            by_room
                .entry(row.result.room_id.as_str())
                .or_default()
                .push(row.result.clone());
        }
    }
    let room_sizes: Vec<(String, usize)> = matrix
        .rooms()
        .into_iter()
        .map(|(room_id, members)| (room_id, members.len()))
        .collect();
    if let Some(unknown) = by_room
        .keys()
        .find(|room| !room_sizes.iter().any(|(known, _)| known == *room))
    {
        bail!(
            "results file mentions room {unknown} which is absent from {}",
            args.responses.display()
        );
    }

    // Rooms screen independently; output order follows the matrix.
    let reports: Vec<RoomReport> = room_sizes
        .par_iter()
        .map(|(room_id, num_students)| {
            let results = by_room.get(room_id.as_str()).map_or(&[][..], Vec::as_slice);
            room_report(
                room_id,
                *num_students,
                results,
                args.p_star,
                args.threshold,
                rule,
            )
        })
        .collect::<Result<_, _>>()?;

    write_room_reports(&args.out, &reports)?;
    manifest.output(&args.out);

    let summary = massive_summary(&reports);
    println!(
        "wrote {} ({} rooms, {} flagged massive, proportion {})",
        args.out.display(),
        summary.num_rooms,
        summary.num_flagged,
        sig6(summary.proportion)
    );
    if let Some(summary_path) = &args.summary_out {
        let mut file = fs::File::create(summary_path)
            .with_context(|| format!("cannot write {}", summary_path.display()))?;
        writeln!(file, "num_rooms,num_flagged,proportion")?;
        writeln!(
            file,
            "{},{},{}",
            summary.num_rooms, summary.num_flagged, summary.proportion
        )?;
        manifest.output(summary_path);
    }
    Ok(())
}

fn write_room_reports(path: &Path, reports: &[RoomReport]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    writer.write_record([
        "room_id",
        "num_students",
        "num_tests",
        "suspected_share",
        "massive_flag",
    ])?;
    for report in reports {
        writer.write_record([
            report.room_id.as_str(),
            &report.num_students.to_string(),
            &report.num_tests.to_string(),
            &format!("{}", report.suspected_share),
            if report.massive_flag { "true" } else { "false" },
        ])?;
    }
    writer.flush()?;
    Ok(())
}

fn parse_synthetic_spec(raw: &str) -> Result<SyntheticSpec> {
    let body = raw.strip_prefix("nrm:").ok_or_else(|| {
        anyhow!("synthetic spec must look like nrm:items=48,n=4,students=2000[,rooms=20]")
    })?;
    let mut spec = SyntheticSpec {
        items: 0,
        options: 0,
        students: 0,
        rooms: 20,
    };
    for part in body.split(',') {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| anyhow!("bad synthetic field {part:?}"))?;
        let value: usize = value
            .parse()
            .with_context(|| format!("bad value in {part:?}"))?;
        match key.trim() {
            "items" => spec.items = value,
            "n" => spec.options = value,
            "students" => spec.students = value,
            "rooms" => spec.rooms = value,
            other => bail!("unknown synthetic field {other:?}"),
        }
    }
    if spec.items == 0 || spec.options < 2 || spec.students == 0 || spec.rooms == 0 {
        bail!("synthetic spec needs items>=1, n>=2, students>=1, rooms>=1");
    }
    Ok(spec)
}

pub fn cmd_simulate(args: &SimulateArgs, manifest: &mut ManifestBuilder) -> Result<()> {
    manifest.seed(args.seed);
    let variants = parse_variants(&args.variants)?;
    let needs_omega = variants.iter().any(|v| v.family == Family::Omega);
    let needs_gamma = variants.iter().any(|v| v.family == Family::Gamma);

    // Assemble the data and the behavioral models.
    let (matrix, true_model) = match (&args.synthetic, &args.responses) {
        (Some(spec_raw), None) => {
            let spec = parse_synthetic_spec(spec_raw)?;
            let (model, matrix) = synthetic_population(&spec, args.seed)?;
            eprintln!(
                "synthetic population: {} students x {} items (n={}), {} rooms",
                spec.students, spec.items, spec.options, spec.rooms
            );
            (matrix, Some(model))
        }
        (None, Some(responses)) => {
            let key = args
                .key
                .as_ref()
                .ok_or_else(|| anyhow!("--responses needs --key"))?;
            let (_, matrix) = load_inputs(manifest, responses, key, args.n_options)?;
            (matrix, None)
        }
        _ => bail!("pass exactly one of --synthetic or --responses"),
    };

    let omega_scorer = if needs_omega {
        let model = match (&true_model, args.use_true_model) {
            (Some(model), true) => model.clone(),
            _ => {
                let config = NrmFitConfig {
                    quad_nodes: args.quad_nodes,
                    max_cycles: args.max_cycles,
                    tol: args.tol,
                    min_examinees: args.min_examinees,
                };
                let fit = fit_nominal_mml(&matrix, &config)?;
                eprintln!(
                    "nominal model refit: {} cycles, {}",
                    fit.cycles,
                    if fit.converged {
                        "converged"
                    } else {
                        "cycle limit reached"
                    }
                );
                fit.model
            }
        };
        Some(Scorer::from_nominal(&model, &matrix)?)
    } else {
        None
    };
    let gamma_scorer = if needs_gamma {
        let model = fit_wesolowsky(&matrix)?;
        Some(Scorer::from_wesolowsky(&model, &matrix)?)
    } else {
        None
    };

    let levels = match &args.levels {
        Some(raw) => raw
            .split(',')
            .map(|part| part.trim().parse::<usize>().context("bad copy level"))
            .collect::<Result<Vec<usize>>>()?,
        None => default_copy_levels(matrix.design().num_questions()),
    };
    let config = SimulationConfig {
        num_pairs: args.pairs,
        alpha: args.alpha,
        copy_levels: levels,
        seed: args.seed,
        continuity_correction: args.continuity_correction,
    };
    let scorers = ScorerSet {
        omega: omega_scorer.as_ref(),
        gamma: gamma_scorer.as_ref(),
    };
    let rates = run_protocol(&matrix, &scorers, &variants, &config)?;

    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("cannot create {}", args.out_dir.display()))?;
    let type1_path = args.out_dir.join("type1.csv");
    let power_path = args.out_dir.join("power.csv");
    write_type1_csv(&type1_path, &rates)?;
    write_power_csv(&power_path, &rates)?;
    manifest.output(&type1_path);
    manifest.output(&power_path);

    for run in &rates {
        println!(
            "{:8} type-I {} per 1000 (se {})",
            run.variant.name(),
            sig6(run.type1.per_thousand()),
            sig6(run.type1.se * 1000.0)
        );
    }
    println!(
        "wrote {} and {}",
        type1_path.display(),
        power_path.display()
    );
    Ok(())
}

fn write_type1_csv(path: &Path, rates: &[VariantRates]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    writer.write_record(["variant", "type1_rate", "se"])?;
    for run in rates {
        writer.write_record([
            run.variant.name(),
            &format!("{}", run.type1.rate),
            &format!("{}", run.type1.se),
        ])?;
    }
    writer.flush()?;
    Ok(())
}

fn write_power_csv(path: &Path, rates: &[VariantRates]) -> Result<()> {
    let mut writer =
        csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))?;
    writer.write_record(["variant", "k", "power", "se"])?;
    for run in rates {
        for point in &run.power {
            writer.write_record([
                run.variant.name(),
                &point.copy_level.to_string(),
                &format!("{}", point.rate),
                &format!("{}", point.se),
            ])?;
        }
    }
    writer.flush()?;
    Ok(())
}
