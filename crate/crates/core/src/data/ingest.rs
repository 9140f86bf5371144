//! CSV ingestion. Malformed rows are collected as [`Reject`]s; only a
//! missing required column (or an unreadable file) is fatal.

use std::collections::HashMap;
use std::path::Path;

use serde::Serialize;

use super::types::{Action, Event, Id, UserProfile, VoucherInfo};
use crate::error::{Error, Result};

pub const EVENTS_FILE: &str = "events.csv";
pub const VOUCHERS_FILE: &str = "vouchers.csv";
pub const SESSIONS_FILE: &str = "sessions.csv";
pub const PROFILES_FILE: &str = "profiles.csv";

pub const EVENT_COLUMNS: [&str; 8] = [
    "user_id",
    "item_id",
    "action",
    "timestamp",
    "category_id",
    "brand_id",
    "shop_id",
    "price_level",
];
pub const VOUCHER_COLUMNS: [&str; 4] = ["voucher_id", "activity_id", "min_spend", "discount_amount"];
pub const SESSION_COLUMNS: [&str; 5] = ["user_id", "voucher_id", "collect_ts", "end_ts", "label"];
pub const PROFILE_COLUMNS: [&str; 6] = [
    "user_id",
    "age_level",
    "gender",
    "purchase_level",
    "order_count",
    "order_amount",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Reject {
    pub file: String,
    /// 1-based line number, header being line 1.
    pub line: u64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionRow {
    pub user_id: Id,
    pub voucher_id: Id,
    pub collect_ts: i64,
    pub end_ts: i64,
    pub label: u8,
}

/// Validated rows from the four input files.
#[derive(Clone, Debug, Default)]
pub struct RawData {
    pub events: Vec<Event>,
    pub vouchers: Vec<VoucherInfo>,
    pub sessions: Vec<SessionRow>,
    pub profiles: Vec<UserProfile>,
    pub rejects: Vec<Reject>,
}

/// Shares one allocation per distinct id string.
#[derive(Default)]
pub struct Interner {
    map: HashMap<String, Id>,
}

impl Interner {
    pub fn intern(&mut self, s: &str) -> Id {
        if let Some(id) = self.map.get(s) {
            return id.clone();
        }
        let id: Id = s.into();
        self.map.insert(s.to_string(), id.clone());
        id
    }
}

/// Reads `events.csv`, `vouchers.csv`, `sessions.csv` and `profiles.csv` from `dir`.
pub fn ingest_dir(dir: &Path) -> Result<RawData> {
    ingest(
        &dir.join(EVENTS_FILE),
        &dir.join(VOUCHERS_FILE),
        &dir.join(SESSIONS_FILE),
        &dir.join(PROFILES_FILE),
    )
}

pub fn ingest(events: &Path, vouchers: &Path, sessions: &Path, profiles: &Path) -> Result<RawData> {
    let mut raw = RawData::default();
    let mut ids = Interner::default();

    read_table(events, &EVENT_COLUMNS, &mut raw.rejects, |f| {
        let ts: i64 = num(f[3], "timestamp")?;
        if ts <= 0 {
            return Err(format!("timestamp {ts} must be positive"));
        }
        let action: Action = f[2].parse().map_err(|_| "unsupported action".to_string())?;
        raw.events.push(Event {
            user_id: id(&mut ids, f[0], "user_id")?,
            item_id: id(&mut ids, f[1], "item_id")?,
            action,
            timestamp: ts,
            category_id: ids.intern(f[4]),
            brand_id: ids.intern(f[5]),
            shop_id: ids.intern(f[6]),
            price_level: num(f[7], "price_level")?,
        });
        Ok(())
    })?;

    read_table(vouchers, &VOUCHER_COLUMNS, &mut raw.rejects, |f| {
        let min_spend: f64 = num(f[2], "min_spend")?;
        let discount: f64 = num(f[3], "discount_amount")?;
        if !(discount > 0.0 && discount <= min_spend) {
            return Err(format!(
                "discount_amount {discount} must satisfy 0 < discount <= min_spend {min_spend}"
            ));
        }
        raw.vouchers.push(VoucherInfo {
            voucher_id: id(&mut ids, f[0], "voucher_id")?,
            activity_id: ids.intern(f[1]),
            min_spend,
            discount_amount: discount,
        });
        Ok(())
    })?;

    read_table(sessions, &SESSION_COLUMNS, &mut raw.rejects, |f| {
        let collect_ts: i64 = num(f[2], "collect_ts")?;
        let end_ts: i64 = num(f[3], "end_ts")?;
        if collect_ts <= 0 {
            return Err(format!("collect_ts {collect_ts} must be positive"));
        }
        if end_ts < collect_ts {
            return Err(format!("end_ts {end_ts} before collect_ts {collect_ts}"));
        }
        let label = match f[4] {
            "0" => 0,
            "1" => 1,
            other => return Err(format!("label {other:?} not in {{0,1}}")),
        };
        raw.sessions.push(SessionRow {
            user_id: id(&mut ids, f[0], "user_id")?,
            voucher_id: id(&mut ids, f[1], "voucher_id")?,
            collect_ts,
            end_ts,
            label,
        });
        Ok(())
    })?;

    read_table(profiles, &PROFILE_COLUMNS, &mut raw.rejects, |f| {
        raw.profiles.push(UserProfile {
            user_id: id(&mut ids, f[0], "user_id")?,
            age_level: ids.intern(f[1]),
            gender: ids.intern(f[2]),
            purchase_level: ids.intern(f[3]),
            order_count: num(f[4], "order_count")?,
            order_amount: num(f[5], "order_amount")?,
        });
        Ok(())
    })?;

    Ok(raw)
}

fn id(ids: &mut Interner, s: &str, col: &str) -> Result<Id, String> {
    if s.is_empty() {
        return Err(format!("empty {col}"));
    }
    Ok(ids.intern(s))
}

fn num<T: std::str::FromStr>(s: &str, col: &str) -> Result<T, String> {
    s.trim().parse().map_err(|_| format!("unparseable {col} {s:?}"))
}

/// Streams `path`, calling `row` with the required fields in `columns`
/// order. A zero-byte file is treated as an empty table.
fn read_table(
    path: &Path,
    columns: &[&str],
    rejects: &mut Vec<Reject>,
    mut row: impl FnMut(&[&str]) -> Result<(), String>,
) -> Result<()> {
    let file_name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.len() == 0 {
        return Ok(());
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let mut index = Vec::with_capacity(columns.len());
    for col in columns {
        match headers.iter().position(|h| h.trim() == *col) {
            Some(i) => index.push(i),
            None => return Err(Error::Data(format!("{file_name}: missing required column {col}"))),
        }
    }
    let mut record = csv::StringRecord::new();
    loop {
        let line = reader.position().line();
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                rejects.push(Reject {
                    file: file_name.clone(),
                    line,
                    reason: e.to_string(),
                });
                continue;
            }
        }
        let line = record.position().map_or(line, |p| p.line());
        if record.len() != headers.len() {
            rejects.push(Reject {
                file: file_name.clone(),
                line,
                reason: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
            continue;
        }
        let fields: Vec<&str> = index.iter().map(|&i| record.get(i).unwrap_or("").trim()).collect();
        if let Err(reason) = row(&fields) {
            rejects.push(Reject {
                file: file_name.clone(),
                line,
                reason,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_all(dir: &Path, events: &str, vouchers: &str, sessions: &str, profiles: &str) {
        fs::write(dir.join(EVENTS_FILE), events).unwrap();
        fs::write(dir.join(VOUCHERS_FILE), vouchers).unwrap();
        fs::write(dir.join(SESSIONS_FILE), sessions).unwrap();
        fs::write(dir.join(PROFILES_FILE), profiles).unwrap();
    }

    const EV_HEAD: &str = "user_id,item_id,action,timestamp,category_id,brand_id,shop_id,price_level\n";
    const VO_HEAD: &str = "voucher_id,activity_id,min_spend,discount_amount\n";
    const SE_HEAD: &str = "user_id,voucher_id,collect_ts,end_ts,label\n";
    const PR_HEAD: &str = "user_id,age_level,gender,purchase_level,order_count,order_amount\n";

    #[test]
    fn empty_files_ingest() {
        let dir = tempfile::tempdir().unwrap();
        write_all(dir.path(), EV_HEAD, VO_HEAD, SE_HEAD, PR_HEAD);
        let raw = ingest_dir(dir.path()).unwrap();
        assert!(raw.events.is_empty() && raw.sessions.is_empty() && raw.rejects.is_empty());

        fs::write(dir.path().join(EVENTS_FILE), "").unwrap();
        assert!(ingest_dir(dir.path()).unwrap().events.is_empty());
    }

    #[test]
    fn missing_column_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        write_all(
            dir.path(),
            "user_id,item_id,action,timestamp,category_id,brand_id,shop_id\n",
            VO_HEAD,
            SE_HEAD,
            PR_HEAD,
        );
        let err = ingest_dir(dir.path()).unwrap_err().to_string();
        assert!(err.contains("price_level"), "{err}");
    }

    #[test]
    fn bad_rows_are_rejected_with_reasons() {
        let dir = tempfile::tempdir().unwrap();
        let events = format!(
            "{EV_HEAD}u1,i1,click,10,c,b,s,1\nu1,i2,atc,abc,c,b,s,1\nu1,i3,atc,0,c,b,s,1\nu1,i4,ord,12,c,b\nu1,i5,ord,12,c,b,s,2\n"
        );
        let vouchers = format!("{VO_HEAD}v1,a1,100,10\nv2,a1,10,20\nv3,a1,10,0\n");
        let sessions = format!("{SE_HEAD}u1,v1,20,30,1\nu1,v1,40,30,0\nu1,v1,50,60,2\n");
        write_all(dir.path(), &events, &vouchers, &sessions, PR_HEAD);
        let raw = ingest_dir(dir.path()).unwrap();
        assert_eq!(raw.events.len(), 1);
        assert_eq!(raw.vouchers.len(), 1);
        assert_eq!(raw.sessions.len(), 1);
        let reasons: Vec<_> = raw
            .rejects
            .iter()
            .map(|r| (r.file.as_str(), r.line, r.reason.as_str()))
            .collect();
        assert_eq!(reasons[0], ("events.csv", 2, "unsupported action"));
        assert!(reasons[1].2.contains("timestamp"));
        assert!(reasons[2].2.contains("positive"));
        assert!(reasons[3].2.contains("fields"));
        assert_eq!(raw.rejects.iter().filter(|r| r.file == "vouchers.csv").count(), 2);
        assert_eq!(raw.rejects.iter().filter(|r| r.file == "sessions.csv").count(), 2);
    }
}
