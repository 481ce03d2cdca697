"""Persona-driven simulation harness for LLM shopping assistants.

Profiles become persona prompts (:mod:`persim.persona`), personas hold a
reference interview with an assistant (:mod:`persim.dialogue`), the
interview drives BM25 retrieval over a product corpus (:mod:`persim.corpus`)
and LLM re-ranking (:mod:`persim.recommend`), and a judge model scores the
resulting lists (:mod:`persim.evaluate`). Every model call goes through a
swappable backend (:mod:`persim.llm_backend`).
"""

__version__ = "0.1.0"
