use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use clap::Args;
use mmb_core::serve::{serve, AppState, ChatModel, Defaults, ServeOptions};
use serde::Deserialize;

use crate::layered::{layered, with_config};
use crate::shared::{self, BeamArgs};

#[derive(Args, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeArgs {
    /// JSON file with any of these options; flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Address to bind; 127.0.0.1 by default.
    #[arg(long)]
    pub host: Option<String>,
    /// Port to bind; 8080 by default, 0 picks a free port.
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Image feature file listed by GET /images.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Directory of `<image_id>.{jpg,jpeg,png,webp}` thumbnails.
    #[arg(long)]
    pub thumbnails: Option<PathBuf>,
    #[arg(long)]
    pub blocklist: Option<PathBuf>,
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Default gender control string for new sessions (`f0 m0` by default).
    #[arg(long)]
    pub degender: Option<String>,
    /// Default style for new sessions (`positive/neutral` by default).
    #[arg(long)]
    pub bucket: Option<String>,
    /// Also apply the default style to sessions without an image.
    #[arg(long)]
    pub style_without_image: bool,
    #[command(flatten)]
    pub beam: BeamArgs,
}

layered!(ServeArgs {
    opt: [host, port, checkpoint, features, thumbnails, blocklist, classifier, degender, bucket],
    flag: [style_without_image],
    list: [],
    nested: [beam]
});

pub fn run(args: ServeArgs) -> anyhow::Result<()> {
    let config = args.config.clone();
    let args = with_config(args, config.as_deref())?;
    let base = Defaults::default();
    let opts = ServeOptions {
        checkpoint: shared::require(args.checkpoint.clone(), "checkpoint")?,
        features: args.features.clone(),
        blocklist: args.blocklist.clone(),
        classifier: args.classifier.clone(),
        beam: args.beam.config()?,
        defaults: Defaults {
            gender: args.degender.clone().or(base.gender),
            style: args.bucket.clone().or(base.style),
            style_without_image: args.style_without_image,
        },
    };
    let model = ChatModel::load(&opts)?;
    let state = Arc::new(AppState::new(model, args.thumbnails.clone()));
    let addr = format!("{}:{}", args.host.as_deref().unwrap_or("127.0.0.1"), args.port.unwrap_or(8080));
    let runtime = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        let local = listener.local_addr()?;
        tracing::info!(%local, "serving");
        println!("listening on http://{local}");
        serve(listener, state).await?;
        Ok(())
    })
}
