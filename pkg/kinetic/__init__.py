__title__ = 'Kinetic IPS'
__version__ = '0.1.0'
__author__ = 'Lincolwn Martins'
