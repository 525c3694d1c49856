"""Reverse-mode autodiff laboratory for gradient-isolated shortcuts and
parameter-shared fusion in small feature-pyramid networks."""

from gradflow._core import *  # noqa: F401,F403
from gradflow._core import __version__  # noqa: F401
