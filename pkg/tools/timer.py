import time


def time_formatter(func):

    def in_hms(seconds: float) -> str:
        hours, rem = divmod(seconds, 3600)
        minutes, seconds = divmod(rem, 60)
        return f"{int(hours):0>2}:{int(minutes):0>2}:{float(seconds):05.2f}"

    def wrapper(*args, **kwargs):
        __time = func(*args, **kwargs)
        __format = kwargs.get("_format")
        match __format:
            case "hms":
                return in_hms(__time)
            case "ms":
                return __time * 1000.0
            case _:
                return __time

    return wrapper


class Timer:
    """perf_counter stopwatch; Timer(autostart=True) starts on construction."""

    def __init__(self, autostart: bool = False) -> None:
        self.__start_time = time.perf_counter() if autostart else None

    def __check_started(self) -> None:
        if self.__start_time is None:
            raise TimerError(f"Timer is not running yet. Use .start() to start it")

    def get_start_time(self):
        return self.__start_time

    def start(self) -> None:
        """Start timer"""
        if self.__start_time is not None:
            raise TimerError(f"Timer is already running. Use .reset() to restart it")
        self.__start_time = time.perf_counter()

    def reset(self) -> None:
        """Reset timer"""
        self.__start_time = time.perf_counter()

    @time_formatter
    def elapsed(self, *args, **kwargs) -> float:
        """Return time elapsed from start (seconds, or per _format: 'ms' / 'hms')."""
        self.__check_started()
        return time.perf_counter() - self.__start_time


class TimerError(Exception):
    """A custom exception used to report errors in use of Timer class"""
    pass
