import time
from typing import Any, Callable, Dict, List, Tuple


def print_banner(command: str, config_label: str) -> None:
    """
    Displays the framed header of a command run.

    Args:
        command (str): Subcommand name (e.g. 'scan').
        config_label (str): Configuration or input file the command works on.
    """
    print("=" * 64)
    print("🔬  MOTIONAL-STATE EXPANSION SIMULATOR  🔬")
    print("=" * 64)
    print(f"  Command : {command}")
    print(f"  Input   : {config_label}")
    print("-" * 64)


def execute_mission(task_name: str, task_function: Callable, *args: Any) -> Any:
    """
    Runs one step of a command and reports how long it took.

    Args:
        task_name (str): The identifier for the step (e.g., 'SCAN').
        task_function (Callable): The work to be executed.
        *args: Arguments passed on to task_function.

    Returns:
        Whatever task_function returns.
    """
    print(f"\n{'—' * 25} {task_name} {'—' * 25}")

    start_time = time.perf_counter()
    result = task_function(*args)
    duration = time.perf_counter() - start_time

    print(f"⏱️  Duration: {duration:.2f} s")
    print(f"{'—' * (52 + len(task_name))}")
    return result


def print_artifacts(paths: List[str]) -> None:
    for path in paths:
        print(f"💾 {path}")


def print_table(rows: List[Tuple[str, Dict[str, str]]]) -> None:
    """Per-axis table: one column per axis, one line per quantity."""
    if not rows:
        return
    quantities = list(rows[0][1])
    width = max(len(q) for q in quantities) + 2
    print("".ljust(width) + "".join(label.rjust(14) for label, _ in rows))
    for quantity in quantities:
        print(quantity.ljust(width) + "".join(values.get(quantity, "-").rjust(14) for _, values in rows))
