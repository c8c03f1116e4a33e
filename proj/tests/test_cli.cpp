#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "pointperc/codecs.hpp"
#include "pointperc/geometry.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
};

Outcome run(const std::string& args, const std::string& env = "") {
  const std::string cmd = env + " \"" POINTPERC_CLI_PATH "\" " + args + " 2>&1";
  Outcome r;
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::vector<json> lines(const std::string& text) {
  std::vector<json> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(json::parse(line));
  return out;
}

pointperc::PointSequence points_of(const json& arr) {
  pointperc::PointSequence s;
  s.cyclic = true;
  for (const auto& p : arr) s.points.push_back({p[0].get<double>(), p[1].get<double>()});
  return s;
}

class Cli : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("pointperc_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }
  std::string path(const std::string& name) const { return (dir_ / name).string(); }
  std::string write(const std::string& name, const std::string& text) const {
    std::ofstream(path(name)) << text;
    return path(name);
  }
  std::string toy() const {
    const Outcome r = run("toydata --seed 3 --out " + path("toy.json"));
    EXPECT_EQ(r.code, 0) << r.out;
    return path("toy.json");
  }

  fs::path dir_;
};

const char* kOneBox = R"({"images":[{"id":1,"width":64,"height":64}],"categories":[{"id":1,"name":"x"}],
  "annotations":[{"id":5,"image_id":1,"category_id":1,"bbox":[2,3,10,6],
  "segmentation":[[2,3,12,3,12,9,7,5,2,9]]}]})";

}  // namespace

TEST_F(Cli, EncodeBox) {
  const Outcome r = run("encode --task detect --points 16 --annotations " + write("a.json", kOneBox));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto recs = lines(r.out);
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0]["annotation_id"], 5);
  EXPECT_EQ(recs[0]["points"].size(), 16u);
  EXPECT_EQ(recs[0]["points"][0], json::parse("[2.0, 3.0]"));
}

TEST_F(Cli, EncodePolygonIsCanonical) {
  const Outcome r = run("encode --task segment --points 32 --annotations " + write("a.json", kOneBox));
  ASSERT_EQ(r.code, 0) << r.out;
  const auto recs = lines(r.out);
  ASSERT_EQ(recs.size(), 1u);
  const auto poly = points_of(recs[0]["points"]);
  ASSERT_EQ(poly.size(), 32u);
  // clockwise on screen (positive shoelace sum with y down) and leftmost first
  double twice_area = 0.0;
  for (std::size_t i = 0; i < 32; ++i) {
    const auto& a = poly[i];
    const auto& b = poly[(i + 1) % 32];
    twice_area += a.x * b.y - b.x * a.y;
  }
  EXPECT_GT(twice_area, 0.0);
  for (std::size_t i = 1; i < 32; ++i) EXPECT_GE(poly[i].x, poly[0].x);
}

TEST_F(Cli, EncodeErrors) {
  const std::string a = write("a.json", kOneBox);
  EXPECT_EQ(run("encode --task classify --annotations " + a).code, 1);
  EXPECT_EQ(run("encode --task detect --points 12 --annotations " + a).code, 1);
  EXPECT_EQ(run("encode --task pose --points 16 --annotations " + a).code, 1);
  EXPECT_EQ(run("encode --task detect").code, 1);
  const std::string flat = write("flat.json", R"({"images":[{"id":1}],"categories":[{"id":1}],
    "annotations":[{"id":42,"image_id":1,"category_id":1,"bbox":[2,3,0,6]}]})");
  const Outcome r = run("encode --task detect --annotations " + flat);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("annotation 42"), std::string::npos) << r.out;
  const Outcome missing = run("encode --task detect --annotations " +
                          write("m.json", R"({"images":[],"categories":[{"id":1}],
    "annotations":[{"id":1,"image_id":9,"category_id":1,"bbox":[0,0,1,1]}]})"));
  EXPECT_EQ(missing.code, 1);
  EXPECT_NE(missing.out.find("image_id 9"), std::string::npos) << missing.out;
}

TEST_F(Cli, GradcheckPassesAndNegativeControlFails) {
  const Outcome a = run("gradcheck --seed 1");
  ASSERT_EQ(a.code, 0) << a.out;
  const auto recs = lines(a.out);
  ASSERT_EQ(recs.size(), 3u);
  for (const auto& r : recs) EXPECT_LT(r["max_relative_error"].get<double>(), 1e-6);
  EXPECT_EQ(run("gradcheck --seed 1").out, a.out);
  const Outcome bad = run("gradcheck --seed 1 --inject-fault");
  EXPECT_EQ(bad.code, 2);
  for (const auto& r : lines(bad.out)) EXPECT_FALSE(r["pass"].get<bool>());
}

TEST_F(Cli, FitDemoDiamond) {
  for (int hops = 1; hops <= 3; ++hops) {
    const Outcome r = run("fitdemo --shape diamond-ambiguity --steps 5 --hops " + std::to_string(hops));
    ASSERT_EQ(r.code, 0) << r.out;
    std::map<std::string, json> c;
    for (const auto& j : lines(r.out))
      if (j.contains("candidate")) c[j["candidate"]] = j;
    ASSERT_EQ(c.size(), 3u);
    EXPECT_NEAR(c["along_edge"]["l1_term"].get<double>(), c["off_edge"]["l1_term"].get<double>(), 1e-12);
    EXPECT_NE(c["along_edge"]["total"].get<double>(), c["off_edge"]["total"].get<double>());
    EXPECT_EQ(c["ground_truth"]["total"].get<double>(), 0.0);
  }
}

TEST_F(Cli, FitDemoStarAndZeroSteps) {
  const Outcome r = run("fitdemo --shape star --seed 0");
  ASSERT_EQ(r.code, 0) << r.out;
  std::map<std::string, double> err;
  for (const auto& j : lines(r.out))
    if (j.contains("final_mean_point_error")) err[j["arm"]] = j["final_mean_point_error"];
  EXPECT_LE(err.at("l1+sapl"), err.at("l1"));

  const Outcome z = run("fitdemo --shape square --steps 0");
  ASSERT_EQ(z.code, 0) << z.out;
  json init;
  std::vector<json> finals;
  for (const auto& j : lines(z.out)) {
    if (j.contains("init")) init = j["init"];
    if (j.contains("final_mean_point_error")) finals.push_back(j["points"]);
  }
  ASSERT_EQ(finals.size(), 2u);
  for (const auto& f : finals) EXPECT_EQ(f, init);
  EXPECT_EQ(run("fitdemo --shape hexagon").code, 1);
}

TEST_F(Cli, TrainToyHalvesTheLoss) {
  const Outcome r = run("traintoy --steps 200");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto recs = lines(r.out);
  ASSERT_EQ(recs.size(), 201u);
  EXPECT_LE(recs.back()["total"].get<double>(), 0.5 * recs.front()["total"].get<double>());
  EXPECT_EQ(run("traintoy --steps 200").out, r.out);
}

TEST_F(Cli, TrainToyZeroRateIsFlat) {
  const Outcome r = run("traintoy --steps 10 --lr 0");
  ASSERT_EQ(r.code, 0) << r.out;
  const auto recs = lines(r.out);
  for (const auto& j : recs) EXPECT_EQ(j["total"], recs.front()["total"]);
}

TEST_F(Cli, TrainToyResumeReproducesLosses) {
  const Outcome full = run("traintoy --steps 20 --task segment");
  ASSERT_EQ(full.code, 0) << full.out;
  const Outcome first = run("traintoy --steps 12 --task segment --checkpoint " + path("ck.txt"));
  ASSERT_EQ(first.code, 0) << first.out;
  const Outcome rest = run("traintoy --steps 8 --resume " + path("ck.txt"));
  ASSERT_EQ(rest.code, 0) << rest.out;
  // the first run's last record and the resumed run's first record are the same step
  const auto a = lines(first.out), b = lines(rest.out), f = lines(full.out);
  ASSERT_EQ(a.size() + b.size() - 1, f.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], f[i]);
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_EQ(b[i], f[a.size() - 1 + i]);
  EXPECT_EQ(run("traintoy --steps 1 --seed 9 --resume " + path("ck.txt")).code, 1);
}

TEST_F(Cli, TrainToyDivergenceExitsWithStep) {
  const Outcome r = run("traintoy --steps 50 --lr 1e6");
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.out.find("step "), std::string::npos) << r.out;
}

TEST_F(Cli, EvaluatePerfectAndEmpty) {
  const std::string gt = toy();
  const json ds = json::parse(std::ifstream(gt));
  std::ostringstream perfect;
  for (int seed = 0; seed < 2; ++seed) {
    for (const auto& a : ds["annotations"]) {
      json base{{"seed", seed}, {"image_id", a["image_id"]}, {"category_id", a["category_id"]}, {"score", 0.9}};
      json d = base, c = base, s = base;
      d["task"] = "detect";
      d["bbox"] = a["bbox"];
      c["task"] = "count";
      c["bbox"] = a["bbox"];
      s["task"] = "segment";
      s["segmentation"] = a["segmentation"];
      perfect << d.dump() << '\n' << c.dump() << '\n' << s.dump() << '\n';
      if (a.contains("keypoints")) {
        json p = base;
        p["task"] = "pose";
        p["keypoints"] = a["keypoints"];
        perfect << p.dump() << '\n';
      }
    }
  }
  const std::string pred = write("perfect.jsonl", perfect.str());
  const std::string args = "evaluate --task detect,segment,pose,count --seeds 2 --annotations " + gt + " --predictions " + pred;
  const Outcome r = run(args);
  ASSERT_EQ(r.code, 0) << r.out;
  std::size_t checked = 0;
  for (const auto& j : lines(r.out)) {
    if (j["class"] != "all") continue;
    if (j["metric"] == "AP") {
      EXPECT_EQ(j["value"].get<double>(), 1.0) << j.dump();
      ++checked;
    }
    if (j["metric"] == "MSE") {
      EXPECT_EQ(j["value"].get<double>(), 0.0) << j.dump();
      EXPECT_EQ(j["scenario"], "unseen");
      ++checked;
    }
  }
  EXPECT_EQ(checked, 4u * 3u);  // 4 tasks x (2 seeds + aggregate)
  EXPECT_EQ(run(args, "POINTPERC_THREADS=1").out, run(args, "POINTPERC_THREADS=7").out);

  // empty predictions: AP 0 and count error equal to the mean squared GT count
  std::map<long long, std::map<long long, double>> counts;
  for (const auto& a : ds["annotations"]) counts[a["category_id"]][a["image_id"]] += 1.0;
  double want = 0.0;
  for (const auto& [cls, imgs] : counts) {
    double se = 0.0;
    for (const auto& [img, n] : imgs) se += n * n;
    want += se / static_cast<double>(imgs.size());
  }
  want /= static_cast<double>(counts.size());
  const Outcome e = run("evaluate --task detect,count --annotations " + gt + " --predictions " + write("e.jsonl", ""));
  ASSERT_EQ(e.code, 0) << e.out;
  for (const auto& j : lines(e.out)) {
    if (j["class"] != "all" || j["seed"] != 0) continue;
    if (j["metric"] == "AP") EXPECT_EQ(j["value"].get<double>(), 0.0);
    if (j["metric"] == "MSE") EXPECT_NEAR(j["value"].get<double>(), want, 1e-12);
  }
}

TEST_F(Cli, EvaluateErrors) {
  const std::string gt = toy();
  const std::string bad = write("bad.jsonl", R"({"task":"segment","image_id":1,"category_id":4,"score":1})");
  const Outcome r = run("evaluate --task segment --annotations " + gt + " --predictions " + bad);
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.out.find("line 1"), std::string::npos) << r.out;
  const std::string ok = write("ok.jsonl", "");
  EXPECT_EQ(run("evaluate --annotations " + gt + " --predictions " + ok, "POINTPERC_THREADS=zero").code, 1);
  EXPECT_EQ(run("evaluate --task nothing --annotations " + gt + " --predictions " + ok).code, 1);
}

TEST_F(Cli, EpisodesAreDeterministic) {
  const std::string gt = toy();
  const std::string novel = write("novel.json", R"({"novel_category_ids": [4, 5]})");
  const std::string args = "episode --shots 2 --seeds 3 --task detect,segment --annotations " + gt + " --novel " + novel;
  const Outcome a = run(args);
  ASSERT_EQ(a.code, 0) << a.out;
  EXPECT_EQ(lines(a.out).size(), 6u);
  EXPECT_EQ(run(args).out, a.out);
  // the shipped VOC-overlap config names ids the toy data does not have
  const Outcome voc = run("episode --annotations " + gt + " --novel " POINTPERC_CONFIG_DIR "/voc_novel_ids.json");
  EXPECT_EQ(voc.code, 1);
  EXPECT_NE(voc.out.find("unknown novel category id"), std::string::npos) << voc.out;
}

TEST_F(Cli, UsageErrors) {
  EXPECT_EQ(run("").code, 1);
  EXPECT_EQ(run("nonsense").code, 1);
  EXPECT_EQ(run("fitdemo --steps many").code, 1);
  EXPECT_EQ(run("--help").code, 0);
}
