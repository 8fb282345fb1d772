"""Region-based facial expression network built on a small numpy autodiff engine."""

__version__ = "0.1.0"

import logging as _logging

_logging.getLogger(__name__).addHandler(_logging.NullHandler())
