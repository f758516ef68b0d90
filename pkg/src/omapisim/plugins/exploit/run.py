"""Process entry point when the exploit bundle is loaded out of process."""

from omapisim.exploit import ExploitTerminal
from omapisim.plugin_host import main

if __name__ == "__main__":
    raise SystemExit(main(ExploitTerminal))
