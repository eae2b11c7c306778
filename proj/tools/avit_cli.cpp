#include "avit/pipeline.hpp"

int main(int argc, char** argv) { return avit::pipeline::run_cli(argc, argv); }
