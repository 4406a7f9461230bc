import signal
import threading
from loguru import logger
import sys


class GracefulKiller:
    """Turn SIGINT/SIGTERM into a flag polled by long-running loops.

    Handlers are only installed from the main thread; elsewhere the killer is a
    plain flag that can still be set through exit_gracefully().
    """
    kill_now = False

    def __init__(self, log_exit: bool = True):
        self.log_exit = log_exit
        self.kill_now = False
        self.__previous = {}
        if threading.current_thread() is not threading.main_thread():
            return
        signals = [signal.SIGINT, signal.SIGTERM]
        if sys.platform == 'win32':
            signals.append(signal.SIGBREAK)
        for sig in signals:
            self.__previous[sig] = signal.signal(sig, self.exit_gracefully)

    def exit_gracefully(self, *args):
        self.kill_now = True
        if self.log_exit:
            logger.critical(f"Stop signal sent. kill_now = {self.kill_now}")

    def release(self):
        """Restore the handlers that were active before this killer."""
        for sig, handler in self.__previous.items():
            signal.signal(sig, handler)
        self.__previous = {}

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.release()
        return False
