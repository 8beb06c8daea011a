// Command-line driver. Filled in alongside the pipeline module.
int main() { return 0; }
