//! SQL execution match against SQLite fixture databases.
//!
//! Both queries run on a fresh read-only connection. Results compare as
//! ordered row lists when the gold query has an `ORDER BY` clause and as
//! row multisets otherwise. Column order matters; column names do not.
//! Values are compared through a canonical text form in which integral
//! reals print as integers, so `COUNT(*)` and `SUM(x)` style results agree.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use regex::Regex;
use rusqlite::types::ValueRef;
use rusqlite::{Connection, OpenFlags};
use serde::{Deserialize, Serialize};

use crate::conversation::digest_bytes;
use crate::error::{Error, Result};

/// Prefix of the first `task_info` line naming the database a state is grounded on.
pub const DATABASE_LINE_PREFIX: &str = "database: ";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqlEnvironment {
    pub database_id: String,
    pub path: PathBuf,
    /// Digest of the schema DDL, checked when the environment is opened.
    pub schema_digest: String,
    pub timeout: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecOutcome {
    pub matched: bool,
    pub timed_out: bool,
}

enum RunError {
    TimedOut,
    Failed(String),
}

fn schema_digest(conn: &Connection) -> Result<String> {
    let mut stmt = conn.prepare(
        "SELECT coalesce(sql, '') FROM sqlite_master WHERE type IN ('table','view','index') ORDER BY name",
    )?;
    let ddl: Vec<String> = stmt
        .query_map([], |r| r.get::<_, String>(0))?
        .collect::<rusqlite::Result<_>>()?;
    Ok(digest_bytes(ddl.join("\n").as_bytes()))
}

impl SqlEnvironment {
    /// Opens an existing database file and records its schema digest.
    pub fn open(database_id: &str, path: &Path, timeout: Duration) -> Result<Self> {
        let conn = Self::connect(path)?;
        Ok(SqlEnvironment {
            database_id: database_id.to_string(),
            path: path.to_path_buf(),
            schema_digest: schema_digest(&conn)?,
            timeout,
        })
    }

    /// Creates `path` from a seed script (schema plus inserts) and opens it.
    pub fn materialize(database_id: &str, seed_sql: &str, path: &Path, timeout: Duration) -> Result<Self> {
        if path.exists() {
            std::fs::remove_file(path)
                .map_err(|e| Error::io(format!("remove {}", path.display()), e))?;
        }
        let conn = Connection::open(path)?;
        conn.execute_batch(seed_sql)?;
        drop(conn);
        Self::open(database_id, path, timeout)
    }

    fn connect(path: &Path) -> Result<Connection> {
        Connection::open_with_flags(path, OpenFlags::SQLITE_OPEN_READ_ONLY).map_err(|e| {
            Error::Environment(format!("cannot open database {}: {e}", path.display()))
        })
    }

    /// A connection whose schema still matches the recorded digest.
    pub fn connection(&self) -> Result<Connection> {
        let conn = Self::connect(&self.path)?;
        let digest = schema_digest(&conn)?;
        if digest != self.schema_digest {
            return Err(Error::Environment(format!(
                "schema of {} changed since the environment was opened",
                self.path.display()
            )));
        }
        Ok(conn)
    }

    fn run(&self, conn: &Connection, sql: &str) -> std::result::Result<Vec<Vec<String>>, RunError> {
        let start = Instant::now();
        let limit = self.timeout;
        let result = (|| {
            conn.progress_handler(1000, Some(move || start.elapsed() > limit))?;
            let mut stmt = conn.prepare(sql)?;
            let cols = stmt.column_count();
            let mut rows = stmt.query([])?;
            let mut out = Vec::new();
            while let Some(row) = rows.next()? {
                out.push((0..cols).map(|i| canonical_value(row.get_ref(i)?)).collect::<rusqlite::Result<Vec<_>>>()?);
            }
            Ok::<_, rusqlite::Error>(out)
        })();
        // clearing the handler only fails on a connection we do not own
        let _ = conn.progress_handler(0, None::<fn() -> bool>);
        result.map_err(|e| {
            if start.elapsed() > limit
                || matches!(e, rusqlite::Error::SqliteFailure(ref f, _) if f.code == rusqlite::ErrorCode::OperationInterrupted)
            {
                RunError::TimedOut
            } else {
                RunError::Failed(e.to_string())
            }
        })
    }

    /// Linearized schema, `table(col, col) | table(col, ...)`, tables in
    /// creation order.
    pub fn schema_text(&self) -> Result<String> {
        let conn = self.connection()?;
        let mut stmt = conn.prepare(
            "SELECT name FROM sqlite_master WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY rowid",
        )?;
        let tables: Vec<String> = stmt
            .query_map([], |r| r.get(0))?
            .collect::<rusqlite::Result<_>>()?;
        let mut parts = Vec::with_capacity(tables.len());
        for t in tables {
            let mut info = conn.prepare(&format!("PRAGMA table_info(\"{}\")", t.replace('"', "\"\"")))?;
            let cols: Vec<String> = info
                .query_map([], |r| r.get(1))?
                .collect::<rusqlite::Result<_>>()?;
            parts.push(format!("{t}({})", cols.join(", ")));
        }
        Ok(parts.join(" | "))
    }

    /// Rows of `sql` in canonical text form.
    pub fn query_rows(&self, sql: &str) -> Result<Vec<Vec<String>>> {
        let conn = self.connection()?;
        self.run(&conn, sql).map_err(|e| match e {
            RunError::TimedOut => Error::Environment(format!("query timed out: {sql}")),
            RunError::Failed(m) => Error::Environment(format!("query failed: {m}: {sql}")),
        })
    }
}

fn canonical_value(v: ValueRef<'_>) -> rusqlite::Result<String> {
    Ok(match v {
        ValueRef::Null => "NULL".into(),
        ValueRef::Integer(i) => i.to_string(),
        ValueRef::Real(r) if r.fract() == 0.0 && r.abs() < 9.0e15 => format!("{}", r as i64),
        ValueRef::Real(r) => format!("{r}"),
        ValueRef::Text(t) => String::from_utf8_lossy(t).into_owned(),
        ValueRef::Blob(b) => format!("x'{}'", hex::encode(b)),
    })
}

fn order_by() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\border\s+by\b").expect("valid regex"))
}

pub fn has_order_by(sql: &str) -> bool {
    order_by().is_match(sql)
}

/// Whether `pred_sql` returns the same result as `gold_sql` on `env`.
/// A failing or timed-out prediction does not match; a failing gold query is
/// an environment error.
pub fn execution_match(pred_sql: &str, gold_sql: &str, env: &SqlEnvironment) -> Result<ExecOutcome> {
    let conn = env.connection()?;
    let gold = match env.run(&conn, gold_sql) {
        Ok(rows) => rows,
        Err(RunError::TimedOut) => {
            return Err(Error::Environment(format!("gold query timed out: {gold_sql}")))
        }
        Err(RunError::Failed(m)) => {
            return Err(Error::Environment(format!("gold query failed: {m}: {gold_sql}")))
        }
    };
    let pred = match env.run(&conn, pred_sql) {
        Ok(rows) => rows,
        Err(RunError::TimedOut) => {
            return Ok(ExecOutcome {
                matched: false,
                timed_out: true,
            })
        }
        Err(RunError::Failed(_)) => {
            return Ok(ExecOutcome {
                matched: false,
                timed_out: false,
            })
        }
    };
    let matched = if has_order_by(gold_sql) {
        pred == gold
    } else {
        let (mut p, mut g) = (pred, gold);
        p.sort();
        g.sort();
        p == g
    };
    Ok(ExecOutcome {
        matched,
        timed_out: false,
    })
}

/// Database id named on the first line of a state's grounding text.
pub fn database_id_from_task_info(task_info: &str) -> Option<&str> {
    task_info
        .lines()
        .next()
        .and_then(|l| l.strip_prefix(DATABASE_LINE_PREFIX))
        .map(str::trim)
}
