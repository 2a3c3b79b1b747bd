# Acceptance tests tag themselves with record_property("criterion", ...); one summary line per criterion.
_lines = []


def pytest_runtest_logreport(report):
    props = dict(report.user_properties)
    if "criterion" not in props:
        return
    if report.when == "call" or (report.failed and report.when == "setup"):
        status = "PASS" if report.passed else "FAIL"
        measured = f"  [{props['measured']}]" if "measured" in props else ""
        _lines.append((props["criterion"], f"{status}  {props['criterion']}{measured}"))


def pytest_terminal_summary(terminalreporter):
    if _lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(_lines, key=lambda item: int(item[0].split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
