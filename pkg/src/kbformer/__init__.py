"""Modular transformer with a globally shared knowledge base.

Submodules: ``core`` (matrices), ``rng``, ``autodiff``, ``attention``,
``knowledge``, ``retrieval``, ``folding``, ``model``, ``training``,
``bench`` and ``cli``.
"""

__version__ = "0.1.0"
