"""Single monotonic clock used by every timing measurement, plus accurate sleeps."""
import time

now = time.perf_counter

# plain sleep overshoots by ~50-100us on Linux; spin through the last stretch
_SPIN_S = 3e-4


def sleep_until(deadline: float) -> None:
    remaining = deadline - now()
    if remaining > _SPIN_S:
        time.sleep(remaining - _SPIN_S)
    while now() < deadline:
        time.sleep(0)  # yield the GIL while spinning


def precise_sleep(seconds: float) -> None:
    if seconds > 0:
        sleep_until(now() + seconds)
