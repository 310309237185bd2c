from ._caflow import *  # noqa: F401,F403
from ._caflow import __doc__  # noqa: F401
