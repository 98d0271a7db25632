"""Three-stage retrieval / tool-planning / validation workflow for ophthalmic VQA,
plus the benchmark and robustness harnesses that drive it."""

__version__ = "0.1.0"

FALLBACK_PREFIX = "No tools available to use, directly output the current response:\n"
