//! Tabular clinical data: parsing, validation, feature encoding, the
//! correlation audit and the logistic-regression baseline.
//!
//! Numerical features are standardized with training-cohort statistics
//! (population standard deviation, so z-scores are reproducible bit for
//! bit); categorical features are one-hot encoded.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Expected CSV header, exact and case-sensitive.
pub const CSV_HEADER: [&str; 14] = [
    "patient_id",
    "age",
    "tumor_size",
    "tumor_type",
    "er",
    "pr",
    "her2",
    "her2_expr",
    "grade",
    "surgery",
    "ki67",
    "subtype",
    "lnm_count",
    "aln_label",
];

/// Nodal metastasis status: none, 1-2 nodes, or 3 and more.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AlnLabel {
    N0,
    N1To2,
    N2Plus,
}

impl AlnLabel {
    pub fn parse(s: &str) -> Option<AlnLabel> {
        match s {
            "N0" => Some(AlnLabel::N0),
            "N1-2" => Some(AlnLabel::N1To2),
            "N2+" => Some(AlnLabel::N2Plus),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AlnLabel::N0 => "N0",
            AlnLabel::N1To2 => "N1-2",
            AlnLabel::N2Plus => "N2+",
        }
    }

    /// 0 = node negative, 1 = any metastasis.
    pub fn binary_class(&self) -> usize {
        match self {
            AlnLabel::N0 => 0,
            _ => 1,
        }
    }

    /// Three-way class index in table order.
    pub fn multiclass_class(&self) -> usize {
        match self {
            AlnLabel::N0 => 0,
            AlnLabel::N1To2 => 1,
            AlnLabel::N2Plus => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surgery {
    Alnd,
    Slnb,
}

impl Surgery {
    fn parse(s: &str) -> Option<Surgery> {
        match s {
            "ALND" => Some(Surgery::Alnd),
            "SLNB" => Some(Surgery::Slnb),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Surgery::Alnd => "ALND",
            Surgery::Slnb => "SLNB",
        }
    }
}

/// One patient's tabular record.
#[derive(Debug, Clone, PartialEq)]
pub struct ClinicalRecord {
    pub patient_id: String,
    pub age: f64,
    pub tumor_size: f64,
    pub tumor_type: String,
    pub er: bool,
    pub pr: bool,
    pub her2: bool,
    pub her2_expr: String,
    pub grade: String,
    pub surgery: Surgery,
    pub ki67: f64,
    pub subtype: String,
    pub lnm_count: u32,
    pub aln_label: AlnLabel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FeatureKind {
    Standardized,
    OneHot,
}

/// One encoded feature group: a standardized scalar or a one-hot block.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    /// Ordered category vocabulary; empty for standardized features.
    pub vocabulary: Vec<String>,
}

impl FeatureSpec {
    fn standardized(name: &str) -> Self {
        FeatureSpec {
            name: name.to_string(),
            kind: FeatureKind::Standardized,
            vocabulary: Vec::new(),
        }
    }

    fn one_hot(name: &str, vocabulary: &[&str]) -> Self {
        FeatureSpec {
            name: name.to_string(),
            kind: FeatureKind::OneHot,
            vocabulary: vocabulary.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn width(&self) -> usize {
        match self.kind {
            FeatureKind::Standardized => 1,
            FeatureKind::OneHot => self.vocabulary.len(),
        }
    }
}

/// Ordered encoding schema for the clinical vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    pub features: Vec<FeatureSpec>,
}

impl Schema {
    pub fn encoded_len(&self) -> usize {
        self.features.iter().map(FeatureSpec::width).sum()
    }
}

/// Encoded clinical feature vector for one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct ClinicalVector {
    pub values: Vec<f64>,
}

/// Training-cohort mean/std per standardized feature. The same object is
/// reused verbatim for validation and test encoding — never refitted.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortStats {
    pub by_feature: BTreeMap<String, (f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSelection {
    /// age, tumor size, ER, PR, HER2 — the reduced clinical set.
    Selected,
    /// Every feature except the metastasis count and the label.
    All,
}

/// Parse and validate the clinical CSV.
pub fn parse_clinical(path: &Path) -> Result<Vec<ClinicalRecord>> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_clinical_str(&raw)
}

pub fn parse_clinical_str(raw: &str) -> Result<Vec<ClinicalRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(raw.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            column: "<header>".into(),
            reason: e.to_string(),
        })?
        .clone();
    let got: Vec<&str> = headers.iter().collect();
    if got != CSV_HEADER {
        return Err(Error::Parse {
            row: 1,
            column: "<header>".into(),
            reason: format!("expected header {:?}, got {:?}", CSV_HEADER.join(","), got.join(",")),
        });
    }
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2; // header occupies line 1
        let row = row.map_err(|e| Error::Parse {
            row: line,
            column: "<row>".into(),
            reason: e.to_string(),
        })?;
        records.push(parse_row(&row, line)?);
    }
    Ok(records)
}

fn parse_row(row: &csv::StringRecord, line: usize) -> Result<ClinicalRecord> {
    let field = |idx: usize| -> Result<&str> {
        let v = row.get(idx).unwrap_or("").trim();
        if v.is_empty() {
            Err(Error::Parse {
                row: line,
                column: CSV_HEADER[idx].into(),
                reason: "missing value".into(),
            })
        } else {
            Ok(v)
        }
    };
    let num = |idx: usize| -> Result<f64> {
        field(idx)?.parse::<f64>().map_err(|_| Error::Parse {
            row: line,
            column: CSV_HEADER[idx].into(),
            reason: format!("not a number: '{}'", row.get(idx).unwrap_or("")),
        })
    };
    let flag = |idx: usize| -> Result<bool> {
        match field(idx)? {
            "0" => Ok(false),
            "1" => Ok(true),
            other => Err(Error::Parse {
                row: line,
                column: CSV_HEADER[idx].into(),
                reason: format!("expected 0 or 1, got '{other}'"),
            }),
        }
    };

    let age = num(1)?;
    if age <= 0.0 {
        return Err(Error::Parse {
            row: line,
            column: "age".into(),
            reason: format!("age must be > 0, got {age}"),
        });
    }
    let tumor_size = num(2)?;
    if tumor_size < 0.0 {
        return Err(Error::Parse {
            row: line,
            column: "tumor_size".into(),
            reason: format!("tumor_size must be >= 0, got {tumor_size}"),
        });
    }
    let ki67 = num(10)?;
    if !(0.0..=100.0).contains(&ki67) {
        return Err(Error::Parse {
            row: line,
            column: "ki67".into(),
            reason: format!("ki67 must be in [0,100], got {ki67}"),
        });
    }
    let surgery = Surgery::parse(field(9)?).ok_or_else(|| Error::Parse {
        row: line,
        column: "surgery".into(),
        reason: format!("unknown category '{}'", row.get(9).unwrap_or("")),
    })?;
    let lnm_count: u32 = field(12)?.parse().map_err(|_| Error::Parse {
        row: line,
        column: "lnm_count".into(),
        reason: format!("not a count: '{}'", row.get(12).unwrap_or("")),
    })?;
    let aln_label = AlnLabel::parse(field(13)?).ok_or_else(|| Error::Parse {
        row: line,
        column: "aln_label".into(),
        reason: format!("unknown category '{}'", row.get(13).unwrap_or("")),
    })?;
    if (lnm_count == 0) != (aln_label == AlnLabel::N0) {
        return Err(Error::Parse {
            row: line,
            column: "lnm_count".into(),
            reason: format!(
                "lnm_count {lnm_count} inconsistent with label {}",
                aln_label.as_str()
            ),
        });
    }
    Ok(ClinicalRecord {
        patient_id: field(0)?.to_string(),
        age,
        tumor_size,
        tumor_type: field(3)?.to_string(),
        er: flag(4)?,
        pr: flag(5)?,
        her2: flag(6)?,
        her2_expr: field(7)?.to_string(),
        grade: field(8)?.to_string(),
        surgery,
        ki67,
        subtype: field(11)?.to_string(),
        lnm_count,
        aln_label,
    })
}

/// z-score a column. When `stats` is given they are reused verbatim
/// (validation/test cohorts); otherwise mean and population std are
/// computed from `values` (training cohort).
pub fn standardize(values: &[f64], stats: Option<(f64, f64)>) -> Result<(Vec<f64>, (f64, f64))> {
    let (mean, std) = match stats {
        Some(s) => s,
        None => {
            if values.is_empty() {
                return Err(Error::Config("cannot standardize an empty column".into()));
            }
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, var.sqrt())
        }
    };
    if std == 0.0 {
        return Err(Error::Config(
            "zero standard deviation: constant feature must be dropped".into(),
        ));
    }
    let z = values.iter().map(|v| (v - mean) / std).collect();
    Ok((z, (mean, std)))
}

/// One-hot encode a category against an ordered vocabulary.
pub fn one_hot(value: &str, vocabulary: &[String]) -> Result<Vec<f64>> {
    let idx = vocabulary
        .iter()
        .position(|v| v == value)
        .ok_or_else(|| Error::Data(format!("unknown category '{value}' (vocabulary {vocabulary:?})")))?;
    let mut out = vec![0.0; vocabulary.len()];
    out[idx] = 1.0;
    Ok(out)
}

fn sorted_unique<F: Fn(&ClinicalRecord) -> &str>(records: &[ClinicalRecord], get: F) -> Vec<String> {
    let mut vals: Vec<String> = records.iter().map(|r| get(r).to_string()).collect();
    vals.sort();
    vals.dedup();
    vals
}

/// Build the encoding schema. The default reduced selection is age,
/// tumor size and the ER/PR/HER2 statuses; `All` additionally encodes
/// every other feature except the metastasis count and the label, with
/// free-text vocabularies derived from the records in sorted order.
pub fn select_features(records: &[ClinicalRecord], selection: FeatureSelection) -> Schema {
    let binary = ["0", "1"];
    let mut features = vec![
        FeatureSpec::standardized("age"),
        FeatureSpec::standardized("tumor_size"),
        FeatureSpec::one_hot("er", &binary),
        FeatureSpec::one_hot("pr", &binary),
        FeatureSpec::one_hot("her2", &binary),
    ];
    if selection == FeatureSelection::All {
        features.push(FeatureSpec::standardized("ki67"));
        for (name, vocab) in [
            ("tumor_type", sorted_unique(records, |r| &r.tumor_type)),
            ("her2_expr", sorted_unique(records, |r| &r.her2_expr)),
            ("grade", sorted_unique(records, |r| &r.grade)),
            ("subtype", sorted_unique(records, |r| &r.subtype)),
        ] {
            features.push(FeatureSpec {
                name: name.to_string(),
                kind: FeatureKind::OneHot,
                vocabulary: vocab,
            });
        }
        features.push(FeatureSpec::one_hot("surgery", &["ALND", "SLNB"]));
    }
    Schema { features }
}

fn raw_value(record: &ClinicalRecord, name: &str) -> f64 {
    match name {
        "age" => record.age,
        "tumor_size" => record.tumor_size,
        "ki67" => record.ki67,
        other => unreachable!("no numeric feature named {other}"),
    }
}

fn raw_category<'a>(record: &'a ClinicalRecord, name: &str) -> &'a str {
    match name {
        "tumor_type" => &record.tumor_type,
        "her2_expr" => &record.her2_expr,
        "grade" => &record.grade,
        "subtype" => &record.subtype,
        "surgery" => record.surgery.as_str(),
        "er" => {
            if record.er {
                "1"
            } else {
                "0"
            }
        }
        "pr" => {
            if record.pr {
                "1"
            } else {
                "0"
            }
        }
        "her2" => {
            if record.her2 {
                "1"
            } else {
                "0"
            }
        }
        other => unreachable!("no categorical feature named {other}"),
    }
}

/// Fit standardization statistics from the training cohort only.
pub fn fit_stats(train_records: &[ClinicalRecord], schema: &Schema) -> Result<CohortStats> {
    let mut by_feature = BTreeMap::new();
    for spec in &schema.features {
        if spec.kind == FeatureKind::Standardized {
            let column: Vec<f64> = train_records.iter().map(|r| raw_value(r, &spec.name)).collect();
            let (_, stats) = standardize(&column, None)
                .map_err(|_| Error::Config(format!("feature '{}' is constant in the training cohort", spec.name)))?;
            by_feature.insert(spec.name.clone(), stats);
        }
    }
    Ok(CohortStats { by_feature })
}

/// Encode one record against a schema using (training-cohort) stats.
pub fn encode(record: &ClinicalRecord, schema: &Schema, stats: &CohortStats) -> Result<ClinicalVector> {
    let mut values = Vec::with_capacity(schema.encoded_len());
    for spec in &schema.features {
        match spec.kind {
            FeatureKind::Standardized => {
                let (mean, std) = *stats
                    .by_feature
                    .get(&spec.name)
                    .ok_or_else(|| Error::Config(format!("missing stats for feature '{}'", spec.name)))?;
                values.push((raw_value(record, &spec.name) - mean) / std);
            }
            FeatureKind::OneHot => {
                values.extend(one_hot(raw_category(record, &spec.name), &spec.vocabulary)?);
            }
        }
    }
    Ok(ClinicalVector { values })
}

/// Pearson correlation over encoded columns (raw numeric values and
/// one-hot slots) plus a final binary outcome column, for the feature
/// selection audit. Zero-variance columns yield undefined entries off
/// the diagonal.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    pub names: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

pub fn correlation_matrix(records: &[ClinicalRecord], schema: &Schema) -> Result<CorrelationMatrix> {
    if records.len() < 2 {
        return Err(Error::Data("correlation needs at least 2 records".into()));
    }
    let mut names = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for spec in &schema.features {
        match spec.kind {
            FeatureKind::Standardized => {
                names.push(spec.name.clone());
                columns.push(records.iter().map(|r| raw_value(r, &spec.name)).collect());
            }
            FeatureKind::OneHot => {
                for cat in &spec.vocabulary {
                    names.push(format!("{}={}", spec.name, cat));
                    columns.push(
                        records
                            .iter()
                            .map(|r| {
                                if raw_category(r, &spec.name) == cat {
                                    1.0
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    );
                }
            }
        }
    }
    names.push("outcome".into());
    columns.push(
        records
            .iter()
            .map(|r| r.aln_label.binary_class() as f64)
            .collect(),
    );
    let values = pearson_all(&columns);
    Ok(CorrelationMatrix { names, values })
}

fn pearson_all(columns: &[Vec<f64>]) -> Vec<Vec<Option<f64>>> {
    let n = columns[0].len() as f64;
    let means: Vec<f64> = columns.iter().map(|c| c.iter().sum::<f64>() / n).collect();
    let stds: Vec<f64> = columns
        .iter()
        .zip(&means)
        .map(|(c, m)| (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt())
        .collect();
    let k = columns.len();
    let mut out = vec![vec![None; k]; k];
    for i in 0..k {
        for j in i..k {
            let r = if i == j {
                Some(1.0)
            } else if stds[i] == 0.0 || stds[j] == 0.0 {
                None
            } else {
                let cov = columns[i]
                    .iter()
                    .zip(&columns[j])
                    .map(|(a, b)| (a - means[i]) * (b - means[j]))
                    .sum::<f64>()
                    / n;
                Some(cov / (stds[i] * stds[j]))
            };
            out[i][j] = r;
            out[j][i] = r;
        }
    }
    out
}

/// Logistic-regression baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fit by full-batch gradient descent on mean cross-entropy.
pub fn lr_fit(vectors: &[Vec<f64>], labels: &[usize], epochs: usize, lr: f64) -> Result<LogisticModel> {
    if vectors.is_empty() || vectors.len() != labels.len() {
        return Err(Error::Data("lr_fit needs matching non-empty inputs".into()));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Dimension {
            what: "lr feature vectors".into(),
            expected: dim,
            got: vectors.iter().map(Vec::len).find(|&l| l != dim).unwrap_or(dim),
        });
    }
    let n = vectors.len() as f64;
    let mut model = LogisticModel {
        weights: vec![0.0; dim],
        bias: 0.0,
    };
    for _ in 0..epochs {
        let mut grad_w = vec![0.0; dim];
        let mut grad_b = 0.0;
        for (x, &y) in vectors.iter().zip(labels) {
            let p = lr_predict(&model, x);
            let err = p - y as f64;
            for (g, xi) in grad_w.iter_mut().zip(x) {
                *g += err * xi;
            }
            grad_b += err;
        }
        for (w, g) in model.weights.iter_mut().zip(&grad_w) {
            *w -= lr * g / n;
        }
        model.bias -= lr * grad_b / n;
        if !model.bias.is_finite() || model.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::Divergence(
                "logistic regression diverged; try a smaller learning rate".into(),
            ));
        }
    }
    Ok(model)
}

/// P(positive) = sigmoid(w . x + b), strictly inside (0,1).
pub fn lr_predict(model: &LogisticModel, x: &[f64]) -> f64 {
    let z = model
        .weights
        .iter()
        .zip(x)
        .map(|(w, v)| w * v)
        .sum::<f64>()
        + model.bias;
    sigmoid(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str =
        "patient_id,age,tumor_size,tumor_type,er,pr,her2,her2_expr,grade,surgery,ki67,subtype,lnm_count,aln_label";

    fn row(id: &str, age: &str, size: &str, lnm: &str, label: &str) -> String {
        format!("{id},{age},{size},IDC,1,0,1,2+,2,ALND,30,LuminalB,{lnm},{label}")
    }

    fn sample_records() -> Vec<ClinicalRecord> {
        let csv = format!(
            "{HEADER}\n{}\n{}\n{}\n{}",
            row("P1", "50", "1.5", "0", "N0"),
            row("P2", "61", "3.5", "2", "N1-2"),
            row("P3", "47", "4.0", "5", "N2+"),
            row("P4", "70", "2.0", "0", "N0"),
        );
        parse_clinical_str(&csv).unwrap()
    }

    #[test]
    fn well_formed_file_parses() {
        let records = sample_records();
        assert_eq!(records.len(), 4);
        assert_eq!(records[0].patient_id, "P1");
        assert_eq!(records[1].aln_label, AlnLabel::N1To2);
        assert_eq!(records[2].lnm_count, 5);
    }

    #[test]
    fn bad_number_names_row_and_column() {
        let csv = format!(
            "{HEADER}\n{}\n{}",
            row("P1", "50", "1.5", "0", "N0"),
            row("P2", "abc", "2.0", "0", "N0")
        );
        match parse_clinical_str(&csv) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "age");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn lnm_label_consistency_is_enforced() {
        let csv = format!("{HEADER}\n{}", row("P1", "50", "1.5", "2", "N0"));
        match parse_clinical_str(&csv) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "lnm_count");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_header_is_rejected() {
        let csv = "id,age\nP1,50";
        assert!(matches!(
            parse_clinical_str(csv),
            Err(Error::Parse { row: 1, .. })
        ));
    }

    #[test]
    fn standardize_matches_hand_computation() {
        let (z, (mean, std)) = standardize(&[2.0, 4.0, 6.0], None).unwrap();
        assert_eq!(mean, 4.0);
        assert!((std - 1.632993161855452).abs() < 1e-12);
        assert!((z[0] + 1.224744871391589).abs() < 1e-12);
        assert_eq!(z[1], 0.0);
        assert!((z[2] - 1.224744871391589).abs() < 1e-12);
    }

    #[test]
    fn standardize_reuses_given_stats() {
        let (z, stats) = standardize(&[2.0, 4.0, 6.0], None).unwrap();
        let (z2, stats2) = standardize(&z, Some((0.0, 1.0))).unwrap();
        assert_eq!(z, z2);
        assert_eq!(stats2, (0.0, 1.0));
        // applying the training stats to new data uses them verbatim
        let (z3, stats3) = standardize(&[4.0], Some(stats)).unwrap();
        assert_eq!(stats3, stats);
        assert_eq!(z3, vec![0.0]);
    }

    #[test]
    fn constant_column_is_an_error() {
        assert!(matches!(
            standardize(&[3.0, 3.0, 3.0], None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn one_hot_examples() {
        let vocab: Vec<String> = ["ALND", "SLNB"].iter().map(|s| s.to_string()).collect();
        assert_eq!(one_hot("ALND", &vocab).unwrap(), vec![1.0, 0.0]);
        assert_eq!(one_hot("SLNB", &vocab).unwrap(), vec![0.0, 1.0]);
        assert_eq!(one_hot("only", &["only".to_string()]).unwrap(), vec![1.0]);
        assert!(one_hot("other", &vocab).is_err());
    }

    #[test]
    fn default_schema_is_five_groups_eight_slots() {
        let records = sample_records();
        let schema = select_features(&records, FeatureSelection::Selected);
        assert_eq!(schema.features.len(), 5);
        assert_eq!(schema.encoded_len(), 8); // 2 standardized + 3 binary one-hots
        let all = select_features(&records, FeatureSelection::All);
        assert!(all.encoded_len() > schema.encoded_len());
    }

    #[test]
    fn encoding_standardizes_with_train_stats_only() {
        let records = sample_records();
        let schema = select_features(&records, FeatureSelection::Selected);
        let train = &records[..2];
        let stats = fit_stats(train, &schema).unwrap();
        let v = encode(&records[3], &schema, &stats).unwrap();
        assert_eq!(v.values.len(), 8);
        // age stats come from P1/P2 only: mean 55.5, population std 5.5
        let (mean, std) = stats.by_feature["age"];
        assert_eq!(mean, 55.5);
        assert_eq!(std, 5.5);
        assert!((v.values[0] - (70.0 - 55.5) / 5.5).abs() < 1e-12);
    }

    #[test]
    fn correlation_examples() {
        // feature vs itself / y = -x / the worked pair.
        let x = vec![1.0, 2.0, 3.0];
        let y = vec![1.0, 2.0, 4.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        let m = pearson_all(&[x, y, neg]);
        assert_eq!(m[0][0], Some(1.0));
        assert!((m[0][1].unwrap() - 0.9819805060619657).abs() < 1e-12);
        assert!((m[0][2].unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn correlation_matrix_is_symmetric_with_unit_diagonal() {
        let records = sample_records();
        let schema = select_features(&records, FeatureSelection::Selected);
        let m = correlation_matrix(&records, &schema).unwrap();
        let k = m.names.len();
        assert_eq!(*m.names.last().unwrap(), "outcome");
        for i in 0..k {
            assert_eq!(m.values[i][i], Some(1.0));
            for j in 0..k {
                match (m.values[i][j], m.values[j][i]) {
                    (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12),
                    (None, None) => {}
                    other => panic!("asymmetric definedness {other:?}"),
                }
                if let Some(r) = m.values[i][j] {
                    assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
                }
            }
        }
        // pr is constant 0 in the sample rows: undefined off-diagonal.
        let pr0 = m.names.iter().position(|n| n == "pr=0").unwrap();
        assert_eq!(m.values[pr0][0], None);
    }

    #[test]
    fn zero_model_predicts_half() {
        let model = LogisticModel {
            weights: vec![0.0, 0.0],
            bias: 0.0,
        };
        assert_eq!(lr_predict(&model, &[3.0, -1.0]), 0.5);
    }

    #[test]
    fn separable_1d_data_is_learned_perfectly() {
        let vectors: Vec<Vec<f64>> = (-10..10).filter(|&v| v != 0).map(|v| vec![v as f64]).collect();
        let labels: Vec<usize> = vectors.iter().map(|v| usize::from(v[0] > 0.0)).collect();
        let model = lr_fit(&vectors, &labels, 5000, 0.1).unwrap();
        let correct = vectors
            .iter()
            .zip(&labels)
            .filter(|(x, &y)| usize::from(lr_predict(&model, x) >= 0.5) == y)
            .count();
        assert_eq!(correct, vectors.len());
    }

    #[test]
    fn large_bias_saturates_towards_one() {
        let model = LogisticModel {
            weights: vec![0.0],
            bias: 500.0,
        };
        assert!(lr_predict(&model, &[0.0]) > 1.0 - 1e-12);
    }

    proptest! {
        #[test]
        fn one_hot_sums_to_one(idx in 0usize..5) {
            let vocab: Vec<String> = (0..5).map(|i| format!("c{i}")).collect();
            let v = one_hot(&format!("c{idx}"), &vocab).unwrap();
            prop_assert_eq!(v.iter().sum::<f64>(), 1.0);
        }

        #[test]
        fn lr_predict_is_monotone_in_logit(a in -5.0f64..5.0, b in -5.0f64..5.0) {
            let model = LogisticModel { weights: vec![1.0], bias: 0.0 };
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(lr_predict(&model, &[lo]) <= lr_predict(&model, &[hi]));
        }
    }
}
