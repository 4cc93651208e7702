import logging
import datetime
import os
import sys

from . import termcolors

LOGGER = logging.getLogger(__name__)

LOG_LEVEL_ENV = 'MLECS_LOG'
DEFAULT_LOG_LEVEL = 'ERROR'


# region -- Log levels --

def log_level_from_name(log_level):
    """
    Sanity check a logging level name and convert it to its numeric value.

    :param log_level: String input defining the logging_level:

                            Level      | Numeric Value
                            --------------------------
                            ERROR      | 40
                            WARNING    | 30
                            INFO       | 20
                            DEBUG      | 10
    :return: the numeric level
    """
    log_level_numeric = getattr(logging, str(log_level).upper(), None)
    if not isinstance(log_level_numeric, int):
        raise ValueError('Invalid Log Level: %s' % log_level)
    return log_level_numeric


def log_level_from_env(default=DEFAULT_LOG_LEVEL):
    """
    Read the log level from the MLECS_LOG environment variable.

    :param default: level name used when the variable is not set
    """
    return log_level_from_name(os.environ.get(LOG_LEVEL_ENV, default))

# endregion


# region -- MlecsConsoleHandler --

class MlecsConsoleHandler(logging.Handler):
    """
    Stream Log Handler for mlecs records

    * Keeps the last max_len records in a FIFO for later inspection
    * Prints colourised lines to stderr so stdout stays clean for tables
    """

    def __init__(self, name, *args, **kwargs):
        """
        :param name: Name of the handler
        :type name: str
        :param max_len: How many log records to store in the FIFO
        :param stream: where to print, defaults to sys.stderr
        """
        self._max_len = kwargs.pop('max_len', 1000)
        self._stream = kwargs.pop('stream', None)
        super(MlecsConsoleHandler, self).__init__(*args, **kwargs)

        # This always needs to be present
        self.name = name
        self._records = []

    @property
    def stream(self):
        return self._stream if self._stream is not None else sys.stderr

    def emit(self, record):
        """
        Handle a log record

        :param record: logging.LogRecord
        """
        if len(self._records) >= self._max_len:
            self._records.pop(0)
        self._records.append(record)

        console_text = self.format(record)
        if record.exc_info:
            console_text = '%s Exception: %s' % (console_text, record.exc_info[1])
        colour = termcolors.level_colour(record.levelno)
        self.stream.write(termcolors.colorize(console_text, fg=colour) + '\n')
        self.stream.flush()

    def format(self, record):
        """
        :param record: Log record, of type logging.LogRecord
        :return: Formatted record
        """
        formatted_datetime = datetime.datetime.fromtimestamp(
            record.created).strftime('%Y-%m-%d %H:%M:%S.%f')[:-4]
        return '{} {} {} {}:{} - {}'.format(
            formatted_datetime, record.levelname, record.name,
            record.filename, record.lineno, record.getMessage())

    def get_log_strings(self, num_to_get=None):
        """
        Get the stored log messages, oldest first

        :param num_to_get: how many messages, None for all of them
        """
        records = self._records if num_to_get is None \
            else self._records[:num_to_get]
        return ['%s: %s' % (record.name, record.getMessage())
                for record in records]

# endregion


# region -- Logger-related methods ---

def configure_console_logging(logger_entity, console_handler_name=None,
                              log_level=None):
    """
    Method to configure logging to console using the mlecs console handler

    :param logger_entity: Logging entity to create and add the handler to
    :param console_handler_name: will use logger_entity.name by default
    :param log_level: optional level to apply to the logger
    :return: True if a handler was added, False if one already existed
    """
    if console_handler_name is None:
        if not logger_entity.name:
            errmsg = 'Cannot have a logger without a name!'
            LOGGER.error(errmsg)
            return False
        console_handler_name = '{}_console'.format(logger_entity.name)

    if log_level is not None:
        if isinstance(log_level, str):
            log_level = log_level_from_name(log_level)
        logger_entity.setLevel(log_level)

    for handler in logger_entity.handlers:
        if hasattr(handler, 'baseFilename'):
            # It's a FileHandler, not a console one
            continue
        if (handler.name or '').upper() == console_handler_name.upper():
            return False

    console_handler = MlecsConsoleHandler(name=console_handler_name)
    logger_entity.addHandler(console_handler)
    logger_entity.propagate = False

    LOGGER.debug('Successfully created ConsoleHandler %s' % console_handler_name)
    return True


def configure_file_logging(logging_entity, filename=None, file_dir=None):
    """
    Method to configure logging to file

    :param logging_entity: Logging entity to create and add the FileHandler to
    :param filename: must be in the format of filename.log, defaults to
        mlecs.log
    :param file_dir: must be a valid directory, defaults to the current one
    :return: the handler that was added
    """
    if filename is None:
        filename = 'mlecs.log'
    if file_dir is not None:
        abs_path = os.path.abspath(file_dir)
        if not os.path.isdir(abs_path):
            errmsg = '{} is not a valid directory'.format(file_dir)
            LOGGER.error(errmsg)
            raise ValueError(errmsg)
        log_filename = os.path.join(abs_path, filename)
    else:
        log_filename = filename

    file_handler = logging.FileHandler(log_filename, mode='a')
    formatted_string = '%(asctime)s | %(levelname)s | %(name)s - ' \
                       '%(filename)s:%(lineno)s - %(message)s'
    file_handler.setFormatter(logging.Formatter(formatted_string))
    logging_entity.addHandler(file_handler)

    LOGGER.info('Successfully enabled logging to file at %s' % log_filename)
    return file_handler

# endregion
