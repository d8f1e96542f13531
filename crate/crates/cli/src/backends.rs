use std::fs;
use std::sync::Arc;

use anyhow::Context;
use focus_core::llmclient::{
    CachedBackend, CachedEmbedder, ChatBackend, ConcurrencyLimit, Embedder, Embedders, HttpChatBackend,
    HttpEmbedder, RetryPolicy, RetryingBackend, ScriptedBackend, SyntheticBackend,
};
use focus_core::prompts::{CallContext, PromptCatalog, Prompter};

use crate::config::Settings;

/// Chat backend, embedders and prompt catalog for one invocation.
pub struct Backends {
    pub chat: Arc<dyn ChatBackend>,
    pub embedders: Embedders,
    pub catalog: PromptCatalog,
    pub mock: bool,
}

impl Backends {
    pub fn build(s: &Settings) -> anyhow::Result<Self> {
        let catalog = match &s.prompts {
            Some(dir) => PromptCatalog::load_dir(dir).with_context(|| format!("loading prompts from {}", dir.display()))?,
            None => PromptCatalog::builtin(),
        };
        let (chat, embedders): (Arc<dyn ChatBackend>, Embedders) = if s.mock {
            let synthetic: Arc<dyn ChatBackend> = Arc::new(SyntheticBackend::new());
            let chat: Arc<dyn ChatBackend> = match &s.mock_script {
                Some(path) => {
                    let body = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                    Arc::new(ScriptedBackend::from_json(&body)?.with_fallback(synthetic))
                }
                None => synthetic,
            };
            (chat, Embedders::mock())
        } else {
            let http = HttpChatBackend::from_env()?;
            let chat = ConcurrencyLimit::new(RetryingBackend::new(http, RetryPolicy::default()), s.parallel);
            let embedder = |model: &str| -> anyhow::Result<Arc<dyn Embedder>> {
                let e = ConcurrencyLimit::new(
                    RetryingBackend::new(HttpEmbedder::from_env(model)?, RetryPolicy::default()),
                    s.parallel,
                );
                Ok(match &s.cache_dir {
                    Some(dir) => Arc::new(CachedEmbedder::new(e, dir)?),
                    None => Arc::new(e),
                })
            };
            let embedders = Embedders::new(embedder(&s.similarity_model)?, embedder(&s.simcse_model)?);
            (Arc::new(chat), embedders)
        };
        let chat: Arc<dyn ChatBackend> = match &s.cache_dir {
            Some(dir) => Arc::new(CachedBackend::new(chat, dir)?),
            None => chat,
        };
        Ok(Backends { chat, embedders, catalog, mock: s.mock })
    }

    pub fn prompter(&self, ctx: CallContext) -> Prompter<'_> {
        Prompter::new(self.chat.as_ref(), &self.catalog, ctx)
    }
}
