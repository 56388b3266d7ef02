# db package