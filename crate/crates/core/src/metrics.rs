//! Uplink accounting, per-round records, personalization statistics and
//! their CSV/JSON emitters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WIRE_BITS_PER_PARAM: u64 = 32;

/// Wire bits needed to send `params` parameters.
pub fn comm_cost(params: u64) -> u64 {
    WIRE_BITS_PER_PARAM * params
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round: usize,
    pub client_id: usize,
    pub params: u64,
    pub bytes: u64,
}

/// Client-to-server traffic, with the server broadcast kept apart.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    entries: Vec<LedgerEntry>,
    downlink: Vec<LedgerEntry>,
}

fn entry(round: usize, client_id: usize, params: u64) -> LedgerEntry {
    LedgerEntry {
        round,
        client_id,
        params,
        bytes: comm_cost(params) / 8,
    }
}

impl CommLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_upload(&mut self, round: usize, client_id: usize, params: u64) {
        self.entries.push(entry(round, client_id, params));
    }

    pub fn record_downlink(&mut self, round: usize, client_id: usize, params: u64) {
        self.downlink.push(entry(round, client_id, params));
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn downlink_entries(&self) -> &[LedgerEntry] {
        &self.downlink
    }

    pub fn total_downlink(&self) -> u64 {
        self.downlink.iter().map(|e| e.bytes).sum()
    }

    /// Upload bytes from rounds `<= round`.
    pub fn cumulative_through(&self, round: usize) -> u64 {
        self.entries.iter().filter(|e| e.round <= round).map(|e| e.bytes).sum()
    }
}

pub fn total_upload(ledger: &CommLedger) -> u64 {
    ledger.entries.iter().map(|e| e.bytes).sum()
}

/// `1 - total(a) / total(b)`: the fraction of `b`'s upload that `a` saves.
pub fn reduction_ratio(a: &CommLedger, b: &CommLedger) -> Result<f64> {
    let denom = total_upload(b);
    if denom == 0 {
        return Err(Error::Domain(
            "reduction ratio against a ledger with zero upload".into(),
        ));
    }
    Ok(1.0 - total_upload(a) as f64 / denom as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub ppl_global: f64,
    pub mean_local_loss: f64,
    pub clients: usize,
    pub cum_uplink_bytes: u64,
}

/// One client's three local-test perplexities. Any missing variant makes
/// the row incomplete.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationRow {
    pub client_id: usize,
    pub ppl_global: Option<f64>,
    pub ppl_personalized: Option<f64>,
    pub ppl_local_only: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientGain {
    pub client_id: usize,
    pub ppl_global: f64,
    pub ppl_personalized: f64,
    pub ppl_local_only: f64,
    /// `ppl_global - ppl_personalized`; positive means personalization helped.
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationReport {
    pub clients: Vec<ClientGain>,
    pub mean_ppl_global: f64,
    pub mean_ppl_personalized: f64,
    pub mean_ppl_local_only: f64,
    pub mean_gain: f64,
    pub fraction_improved: f64,
    pub gain_histogram: Vec<HistogramBin>,
}

pub const GAIN_BINS: usize = 10;

fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() {
        return Vec::new();
    }
    if lo == hi {
        return vec![HistogramBin {
            lo,
            hi,
            count: values.len(),
        }];
    }
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<HistogramBin> = (0..bins)
        .map(|i| HistogramBin {
            lo: lo + width * i as f64,
            hi: if i + 1 == bins { hi } else { lo + width * (i + 1) as f64 },
            count: 0,
        })
        .collect();
    for &v in values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        out[i].count += 1;
    }
    out
}

pub fn personalization_stats(rows: &[PersonalizationRow]) -> Result<PersonalizationReport> {
    if rows.is_empty() {
        return Err(Error::IncompleteReport("no clients evaluated".into()));
    }
    let clients: Vec<ClientGain> = rows
        .iter()
        .map(|r| {
            let missing = |what: &str| Error::IncompleteReport(format!("client {} lacks {what}", r.client_id));
            let g = r.ppl_global.ok_or_else(|| missing("ppl_global"))?;
            let p = r.ppl_personalized.ok_or_else(|| missing("ppl_personalized"))?;
            let l = r.ppl_local_only.ok_or_else(|| missing("ppl_local_only"))?;
            Ok(ClientGain {
                client_id: r.client_id,
                ppl_global: g,
                ppl_personalized: p,
                ppl_local_only: l,
                gain: g - p,
            })
        })
        .collect::<Result<_>>()?;
    let n = clients.len() as f64;
    let mean = |f: fn(&ClientGain) -> f64| clients.iter().map(f).sum::<f64>() / n;
    let gains: Vec<f64> = clients.iter().map(|c| c.gain).collect();
    Ok(PersonalizationReport {
        mean_ppl_global: mean(|c| c.ppl_global),
        mean_ppl_personalized: mean(|c| c.ppl_personalized),
        mean_ppl_local_only: mean(|c| c.ppl_local_only),
        mean_gain: mean(|c| c.gain),
        fraction_improved: gains.iter().filter(|&&g| g > 0.0).count() as f64 / n,
        gain_histogram: histogram(&gains, GAIN_BINS),
        clients,
    })
}

/// One point of a hyperparameter sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub value: usize,
    pub final_ppl_global: f64,
    pub final_train_loss: f64,
    pub uplink_bytes: u64,
}

/// Shortest decimal rendering with at most six significant digits.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { format!("{x}") };
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..6).contains(&exp) {
        let fixed = format!("{:.*}", (5 - exp) as usize, x);
        let trimmed = if fixed.contains('.') {
            fixed.trim_end_matches('0').trim_end_matches('.')
        } else {
            &fixed
        };
        trimmed.to_string()
    } else {
        let m = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        format!("{m}e{exp}")
    }
}

/// `x` rounded to the precision the emitters print.
pub fn round_sig(x: f64) -> f64 {
    fmt_sig(x).parse().unwrap_or(x)
}

pub const ROUNDS_HEADER: [&str; 5] = ["round", "ppl_global", "mean_local_loss", "clients", "cum_uplink_bytes"];
pub const LEDGER_HEADER: [&str; 4] = ["round", "client_id", "params", "bytes"];
pub const PERSONALIZATION_HEADER: [&str; 5] = ["client_id", "ppl_global", "ppl_personalized", "ppl_local_only", "gain"];
pub const ABLATION_HEADER: [&str; 4] = ["value", "final_ppl_global", "final_train_loss", "uplink_bytes"];

/// Anything with a fixed CSV schema.
pub trait CsvTable {
    fn header() -> &'static [&'static str];
    fn rows(&self) -> Vec<Vec<String>>;
}

impl CsvTable for [RoundRecord] {
    fn header() -> &'static [&'static str] {
        &ROUNDS_HEADER
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.iter()
            .map(|r| {
                vec![
                    r.round.to_string(),
                    fmt_sig(r.ppl_global),
                    fmt_sig(r.mean_local_loss),
                    r.clients.to_string(),
                    r.cum_uplink_bytes.to_string(),
                ]
            })
            .collect()
    }
}

impl CsvTable for CommLedger {
    fn header() -> &'static [&'static str] {
        &LEDGER_HEADER
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.entries
            .iter()
            .map(|e| {
                vec![
                    e.round.to_string(),
                    e.client_id.to_string(),
                    e.params.to_string(),
                    e.bytes.to_string(),
                ]
            })
            .collect()
    }
}

impl CsvTable for PersonalizationReport {
    fn header() -> &'static [&'static str] {
        &PERSONALIZATION_HEADER
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.clients
            .iter()
            .map(|c| {
                vec![
                    c.client_id.to_string(),
                    fmt_sig(c.ppl_global),
                    fmt_sig(c.ppl_personalized),
                    fmt_sig(c.ppl_local_only),
                    fmt_sig(c.gain),
                ]
            })
            .collect()
    }
}

impl CsvTable for [AblationRow] {
    fn header() -> &'static [&'static str] {
        &ABLATION_HEADER
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.iter()
            .map(|r| {
                vec![
                    r.value.to_string(),
                    fmt_sig(r.final_ppl_global),
                    fmt_sig(r.final_train_loss),
                    r.uplink_bytes.to_string(),
                ]
            })
            .collect()
    }
}

pub fn to_csv<C: CsvTable + ?Sized>(table: &C) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(C::header()).expect("in-memory write");
    for row in table.rows() {
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn write_csv<C: CsvTable + ?Sized>(table: &C, path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(table)).map_err(|e| Error::io(path, e))
}

/// Pretty JSON with every float rounded to six significant digits.
pub fn to_json<S: Serialize>(value: &S) -> Result<Vec<u8>> {
    let mut v = serde_json::to_value(value).map_err(|e| Error::format("json", e.to_string()))?;
    round_floats(&mut v);
    let mut out = serde_json::to_vec_pretty(&v).map_err(|e| Error::format("json", e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

fn round_floats(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Number(n) if n.is_f64() => {
            if let Some(x) = n.as_f64().map(round_sig).and_then(serde_json::Number::from_f64) {
                *n = x;
            }
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(round_floats),
        serde_json::Value::Object(map) => map.values_mut().for_each(round_floats),
        _ => {}
    }
}

pub fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    std::fs::write(path, to_json(value)?).map_err(|e| Error::io(path, e))
}

fn read_table(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format("csv", format!("{}: {e}", path.display())))?;
    let found = r
        .headers()
        .map_err(|e| Error::format("csv", format!("{}: {e}", path.display())))?
        .clone();
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::format(
            "csv",
            format!(
                "{}: header {:?}, expected {header:?}",
                path.display(),
                found.iter().collect::<Vec<_>>()
            ),
        ));
    }
    r.records()
        .map(|rec| rec.map_err(|e| Error::format("csv", format!("{}: {e}", path.display()))))
        .collect()
}

fn field<F: std::str::FromStr>(rec: &csv::StringRecord, i: usize, path: &Path) -> Result<F> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("csv", format!("{}: bad field {i} in {rec:?}", path.display())))
}

pub fn read_rounds_csv(path: &Path) -> Result<Vec<RoundRecord>> {
    read_table(path, &ROUNDS_HEADER)?
        .iter()
        .map(|r| {
            Ok(RoundRecord {
                round: field(r, 0, path)?,
                ppl_global: field(r, 1, path)?,
                mean_local_loss: field(r, 2, path)?,
                clients: field(r, 3, path)?,
                cum_uplink_bytes: field(r, 4, path)?,
            })
        })
        .collect()
}

pub fn read_ledger_csv(path: &Path) -> Result<Vec<LedgerEntry>> {
    read_table(path, &LEDGER_HEADER)?
        .iter()
        .map(|r| {
            Ok(LedgerEntry {
                round: field(r, 0, path)?,
                client_id: field(r, 1, path)?,
                params: field(r, 2, path)?,
                bytes: field(r, 3, path)?,
            })
        })
        .collect()
}

pub fn read_personalization_csv(path: &Path) -> Result<Vec<ClientGain>> {
    read_table(path, &PERSONALIZATION_HEADER)?
        .iter()
        .map(|r| {
            Ok(ClientGain {
                client_id: field(r, 0, path)?,
                ppl_global: field(r, 1, path)?,
                ppl_personalized: field(r, 2, path)?,
                ppl_local_only: field(r, 3, path)?,
                gain: field(r, 4, path)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(id: usize, g: f64, p: f64) -> PersonalizationRow {
        PersonalizationRow {
            client_id: id,
            ppl_global: Some(g),
            ppl_personalized: Some(p),
            ppl_local_only: Some(g + 1.0),
        }
    }

    #[test]
    fn cost_arithmetic() {
        assert_eq!(comm_cost(0), 0);
        assert_eq!(comm_cost(147_456), 4_718_592);
        assert_eq!(comm_cost(147_456) / 8 / 1024, 576);
    }

    #[test]
    fn counting_closed_form() {
        let mut l = CommLedger::new();
        assert_eq!(total_upload(&l), 0);
        for t in 1..=7 {
            for k in 0..3 {
                l.record_upload(t, k, 1000);
            }
        }
        assert_eq!(total_upload(&l), 7 * 3 * 4000);
        assert!(l
            .entries()
            .iter()
            .all(|e| e.bytes * 8 == e.params * WIRE_BITS_PER_PARAM));
    }

    #[test]
    fn ratio_matches_param_ratio() {
        let (small, big) = (147_456u64, 42_515_456u64);
        let (mut a, mut b) = (CommLedger::new(), CommLedger::new());
        for t in 1..=5 {
            for k in 0..10 {
                a.record_upload(t, k, small);
                b.record_upload(t, k, big);
            }
        }
        let r = reduction_ratio(&a, &b).unwrap();
        assert_eq!(r, 1.0 - small as f64 / big as f64);
        assert!(r > 0.99);
        assert!(reduction_ratio(&a, &CommLedger::new()).is_err());
    }

    #[test]
    fn downlink_kept_apart() {
        let mut l = CommLedger::new();
        l.record_downlink(1, 0, 50);
        assert_eq!(total_upload(&l), 0);
        assert_eq!(l.total_downlink(), 200);
    }

    #[test]
    fn stats_examples() {
        let zero = personalization_stats(&[row(0, 5.0, 5.0), row(1, 3.0, 3.0)]).unwrap();
        assert_eq!(zero.fraction_improved, 0.0);
        assert_eq!(zero.mean_gain, 0.0);
        let r = personalization_stats(&[row(0, 11.0, 10.0), row(1, 12.0, 10.0), row(2, 13.0, 10.0)]).unwrap();
        assert_eq!(r.mean_gain, 2.0);
        assert_eq!(r.gain_histogram.iter().map(|b| b.count).sum::<usize>(), 3);
        let mut bad = row(3, 1.0, 1.0);
        bad.ppl_local_only = None;
        assert!(matches!(personalization_stats(&[bad]), Err(Error::IncompleteReport(_))));
    }

    #[test]
    fn sig_formatting() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(1.0), "1");
        assert_eq!(fmt_sig(9.87654321), "9.87654");
        assert_eq!(fmt_sig(123456.7), "123457");
        assert_eq!(fmt_sig(1234567.0), "1.23457e6");
        assert_eq!(fmt_sig(0.000123456789), "0.000123457");
        assert_eq!(fmt_sig(-2.5e-9), "-2.5e-9");
        assert_eq!(fmt_sig(9.9999999), "10");
    }

    #[test]
    fn headers_are_exact() {
        let csv = String::from_utf8(to_csv::<[RoundRecord]>(&[])).unwrap();
        assert_eq!(csv, "round,ppl_global,mean_local_loss,clients,cum_uplink_bytes\n");
        let csv = String::from_utf8(to_csv(&CommLedger::new())).unwrap();
        assert_eq!(csv, "round,client_id,params,bytes\n");
        let report = personalization_stats(&[row(0, 2.0, 1.0)]).unwrap();
        let csv = String::from_utf8(to_csv(&report)).unwrap();
        assert!(csv.starts_with("client_id,ppl_global,ppl_personalized,ppl_local_only,gain\n"));
    }

    #[test]
    fn emit_round_trips_and_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![
            RoundRecord {
                round: 1,
                ppl_global: 12.5,
                mean_local_loss: 2.25,
                clients: 2,
                cum_uplink_bytes: 800,
            },
            RoundRecord {
                round: 2,
                ppl_global: 11.0,
                mean_local_loss: 2.125,
                clients: 2,
                cum_uplink_bytes: 1600,
            },
        ];
        let p = dir.path().join("rounds.csv");
        write_csv(records.as_slice(), &p).unwrap();
        let first = std::fs::read(&p).unwrap();
        assert_eq!(read_rounds_csv(&p).unwrap(), records);
        write_csv(records.as_slice(), &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);

        let j = dir.path().join("rounds.json");
        write_json(&records, &j).unwrap();
        let back: Vec<RoundRecord> = serde_json::from_slice(&std::fs::read(&j).unwrap()).unwrap();
        assert_eq!(back, records);

        let err = write_csv(records.as_slice(), &dir.path().join("no/such/dir.csv")).unwrap_err();
        assert!(err.to_string().contains("no/such/dir.csv"), "{err}");
    }

    proptest! {
        #[test]
        fn total_is_order_invariant(bytes in prop::collection::vec(0u64..1_000_000, 0..40), seed in any::<u64>()) {
            let mut l = CommLedger::new();
            for (i, &p) in bytes.iter().enumerate() { l.record_upload(i, i, p); }
            let mut order: Vec<usize> = (0..bytes.len()).collect();
            crate::linalg::Rng::seed_from(seed).shuffle(&mut order);
            let mut shuffled = CommLedger::new();
            for &i in &order { shuffled.record_upload(i, i, bytes[i]); }
            prop_assert_eq!(total_upload(&l), total_upload(&shuffled));
            prop_assert_eq!(total_upload(&l), l.entries().iter().map(|e| e.bytes).sum::<u64>());
        }

        #[test]
        fn fraction_improved_matches_loop(gains in prop::collection::vec(-3.0f64..3.0, 1..30)) {
            let rows: Vec<_> = gains.iter().enumerate().map(|(i, g)| row(i, 10.0 + g, 10.0)).collect();
            let r = personalization_stats(&rows).unwrap();
            let mut improved = 0;
            for c in &r.clients { if c.ppl_global > c.ppl_personalized { improved += 1; } }
            prop_assert_eq!((r.fraction_improved * rows.len() as f64).round() as usize, improved);
            prop_assert_eq!(r.gain_histogram.iter().map(|b| b.count).sum::<usize>(), rows.len());
        }

        #[test]
        fn sig_parse_is_close(x in -1e9f64..1e9) {
            let y: f64 = fmt_sig(x).parse().unwrap();
            prop_assert!((x - y).abs() <= 5e-6 * x.abs().max(1e-300));
        }
    }
}
