"""
termcolors.py
-- ANSI colouring for console log lines
"""
import logging

color_names = ('black', 'red', 'green', 'yellow', 'blue', 'magenta', 'cyan', 'white')
foreground = {name: '3%i' % ctr for ctr, name in enumerate(color_names)}
background = {name: '4%i' % ctr for ctr, name in enumerate(color_names)}

RESET = '0'
opt_dict = {'bold': '1', 'underscore': '4', 'reverse': '7'}

# console colour per logging level, lowest level first
LEVEL_COLOURS = (
    (logging.ERROR, 'red'),
    (logging.WARNING, 'yellow'),
    (logging.INFO, 'green'),
    (logging.NOTSET, 'white'),
)


def colorize(text='', opts=(), **kwargs):
    """
    Returns your text, enclosed in ANSI graphics codes.

    Depends on the keyword arguments 'fg' and 'bg', and the contents of
    the opts tuple/list.

    Valid colors:
        'black', 'red', 'green', 'yellow', 'blue', 'magenta', 'cyan', 'white'

    Valid options:
        'bold'
        'underscore'
        'reverse'
        'noreset' - string will not be auto-terminated with the RESET code

    .. code-block:: python

        colorize('round 3 done', fg='green')
        colorize('gradient check failed', fg='red', opts=('bold',))
    """
    code_list = []
    if 'fg' in kwargs:
        code_list.append(foreground[kwargs['fg']])
    if 'bg' in kwargs:
        code_list.append(background[kwargs['bg']])
    for opt in opts:
        if opt in opt_dict:
            code_list.append(opt_dict[opt])
    if 'noreset' not in opts:
        text = text + '\x1b[%sm' % RESET
    return ('\x1b[%sm' % ';'.join(code_list)) + text


def level_colour(levelno):
    """
    The foreground colour used for a record of the given level.

    :param levelno: numeric logging level
    """
    for threshold, colour in LEVEL_COLOURS:
        if levelno >= threshold:
            return colour
    return 'white'

# end
