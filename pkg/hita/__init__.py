from .config import *
from .errors import *

__version__ = '0.1.0'
