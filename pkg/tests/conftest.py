from __future__ import annotations

import textwrap
from pathlib import Path

import pytest

from omapisim.access_control import AccessRule, AccessRuleDb, Policy, WILDCARD
from omapisim.config import ServiceConfig
from omapisim.demo import install_bundle
from omapisim.discovery import write_manifest
from omapisim.service import SmartcardService
from omapisim.vse import AraApplet, EchoApplet, VirtualSecureElement

STALL_INS = 0xEE

# A hardened add-on used by the crash tests: serves an allow-all ARA and an
# echo applet, and blocks forever on INS EE.
STALL_RUN = textwrap.dedent('''
    import time

    from omapisim import access_control as ac
    from omapisim.plugin_host import main
    from omapisim.terminal import UiccTerminal
    from omapisim.vse import AraApplet, EchoApplet, VirtualSecureElement


    class StallTerminal(UiccTerminal):
        def __init__(self, context):
            db = ac.AccessRuleDb((ac.AccessRule(ac.WILDCARD, ac.WILDCARD, ac.Policy.ALLOW),))
            super().__init__(VirtualSecureElement(applets=[EchoApplet(), AraApplet(db)]), "STALL01")

        def get_type(self):
            return "STALL"

        def internal_transmit(self, command):
            if len(command) > 1 and command[1] == 0xEE:
                while True:
                    time.sleep(1)
            return super().internal_transmit(command)


    if __name__ == "__main__":
        raise SystemExit(main(StallTerminal))
''')


def make_bundle(root: Path, dirname: str, package: str, entries=("StallTerminal",), enforce=True,
                signature=b"\x55" * 20, run_source: str = STALL_RUN, executable="run.py") -> Path:
    path = write_manifest(Path(root) / dirname, package, entries, signature, enforce_bind_terminal=enforce,
                          executable=executable)
    if run_source is not None:
        (path / "run.py").write_text(run_source, encoding="utf-8")
    return path


def allow_all_db():
    return AccessRuleDb((AccessRule(WILDCARD, WILDCARD, Policy.ALLOW),))


@pytest.fixture
def make_service(tmp_path):
    """Factory for services on a scratch directory; stopped at teardown."""
    started = []

    def factory(mode="legacy", profile="nexus6", exploit=True, element=None, serve=False, start=True,
                **overrides):
        plugin_root = tmp_path / "plugins"
        plugin_root.mkdir(exist_ok=True)
        if exploit:
            install_bundle(plugin_root)
        cfg = ServiceConfig(profile=profile, loader_mode=mode, plugin_root=plugin_root,
                            socket=tmp_path / "omapi.sock", report_sink=tmp_path / "report.txt",
                            audit_log=tmp_path / "audit.jsonl")
        for k, v in overrides.items():
            setattr(cfg, k, v)
        svc = SmartcardService(cfg, element=element)
        started.append(svc)
        if start:
            svc.start(serve=serve)
        return svc

    yield factory
    for svc in started:
        svc.stop()


@pytest.fixture
def echo_element():
    return VirtualSecureElement(applets=[EchoApplet()])


@pytest.fixture
def open_element():
    """UICC with the echo applet and an allow-all ARA."""
    return VirtualSecureElement(applets=[EchoApplet(), AraApplet(allow_all_db())])


# -- acceptance reporting ------------------------------------------------------
# Tests marked ``acceptance(n, title)`` get one PASS/FAIL line each in the
# terminal summary, in criterion order.

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    number, title = mark.args
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _ACCEPTANCE[number] = (title, report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        title, ok = _ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}")
