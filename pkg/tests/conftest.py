import os
import sys

# lets tests import the independent reference model as a plain module
sys.path.insert(0, os.path.dirname(__file__))
