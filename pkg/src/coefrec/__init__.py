"""coefrec: recover a scalar coefficient mu in -div(mu S) = f from interior data.

The toolkit assembles the weak operator mu -> -div(mu S) on a pair of finite
element spaces (scalar parameters against zero-trace vector tests), computes
its stability constants by a Gram-whitened singular value analysis, solves the
constrained least-squares inversion, and evaluates quantitative error
certificates on benchmark problems (inverse gradient, quasi-static
elastography).
"""

__version__ = "0.1.0"
