//! `manifest.toml`: what ran, with which settings, and how it ended.
//!
//! The file doubles as a config: `--config out/manifest.toml <command>`
//! replays the run with the recorded seed and arguments.

use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::Serialize;
use toml::{Table, Value};

use crate::commands::Ctx;

pub const FILE_NAME: &str = "manifest.toml";

#[derive(Debug)]
pub struct RunManifest {
    command: String,
    config: Option<String>,
    seed: u64,
    out: String,
    revision: String,
    started_unix: u64,
    clock: Instant,
    args: Table,
}

impl RunManifest {
    /// Records the run and writes the manifest with status `running`.
    pub fn start(
        command: &str,
        config: Option<&Path>,
        ctx: &Ctx,
        args: &impl Serialize,
    ) -> anyhow::Result<Self> {
        let manifest = RunManifest {
            command: command.to_string(),
            config: config.map(|p| p.display().to_string()),
            seed: ctx.seed,
            out: ctx.out.display().to_string(),
            revision: env!("ILLUMFIELD_REVISION").to_string(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            clock: Instant::now(),
            args: Table::try_from(args).context("serializing arguments")?,
        };
        manifest.write(ctx, "running", None, None)?;
        Ok(manifest)
    }

    /// Rewrites the manifest with the outcome and wall-clock time.
    pub fn finish(&mut self, ctx: &Ctx, result: &anyhow::Result<()>) -> anyhow::Result<()> {
        let elapsed = self.clock.elapsed().as_secs_f64();
        match result {
            Ok(()) => self.write(ctx, "ok", Some(elapsed), None),
            Err(e) => self.write(ctx, "failed", Some(elapsed), Some(format!("{e:#}"))),
        }
    }

    fn write(
        &self,
        ctx: &Ctx,
        status: &str,
        elapsed: Option<f64>,
        error: Option<String>,
    ) -> anyhow::Result<()> {
        let mut run = Table::new();
        run.insert("command".into(), Value::String(self.command.clone()));
        if let Some(c) = &self.config {
            run.insert("config".into(), Value::String(c.clone()));
        }
        run.insert("revision".into(), Value::String(self.revision.clone()));
        run.insert(
            "version".into(),
            Value::String(env!("CARGO_PKG_VERSION").into()),
        );
        run.insert(
            "started-unix".into(),
            Value::Integer(self.started_unix as i64),
        );
        if let Some(e) = elapsed {
            run.insert("elapsed-secs".into(), Value::Float(e));
        }
        run.insert("status".into(), Value::String(status.into()));
        if let Some(e) = error {
            run.insert("error".into(), Value::String(e));
        }

        let mut doc = Table::new();
        doc.insert(
            "seed".into(),
            Value::Integer(i64::try_from(self.seed).context("seed does not fit a TOML integer")?),
        );
        doc.insert("out".into(), Value::String(self.out.clone()));
        doc.insert("run".into(), Value::Table(run));
        doc.insert(self.command.clone(), Value::Table(self.args.clone()));
        ctx.write(FILE_NAME, toml::to_string(&doc)?)
    }
}
