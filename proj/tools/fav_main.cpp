#include <cstdio>
#include <exception>

#include "fav/train.hpp"

int main(int argc, char** argv) {
  try {
    fav::ParsedCli p = fav::parse_cli(argc, argv);
    if (p.done) return p.exit_code;
    if (p.verb == "pretrain") return fav::cmd_pretrain(p.cfg);
    if (p.verb == "finetune") return fav::cmd_finetune(p.cfg);
    if (p.verb == "svgd") return fav::cmd_svgd(p.cfg);
    if (p.verb == "policy-extract") return fav::cmd_policy(p.cfg);
    if (p.verb == "sweep") return fav::cmd_sweep(p.cfg);
    if (p.verb == "eval") return fav::cmd_eval(p.run_dir_arg);
    if (p.verb == "plot") return fav::cmd_plot(p.run_dir_arg);
    if (p.verb == "config") return fav::cmd_config(p.cfg, p.dump_defaults);
    std::fprintf(stderr, "fav: unhandled verb '%s'\n", p.verb.c_str());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "fav: %s\n", e.what());
    return 1;
  }
}
