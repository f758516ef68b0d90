"""
omapisim: a desk-scale Open Mobile API smartcard service.

Built-in UICC terminal over a virtual secure element, add-on terminal
discovery with a legacy in-process loader and a hardened out-of-process
one, a GlobalPlatform-style access control enforcer, and the
proof-of-concept add-on that shows what the legacy loader gives away.
"""

from pathlib import Path

__version__ = "0.1.0"

PACKAGE_DIR = Path(__file__).resolve().parent
PLUGINS_DIR = PACKAGE_DIR / "plugins"
EXPLOIT_BUNDLE = PLUGINS_DIR / "exploit"
GOLDENS_DIR = PACKAGE_DIR / "goldens"
